//! Dense row-major `f64` tensors and the numeric kernels shared by the graph.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense, row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Standard-normal samples.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The value of a tensor holding exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Contiguous slab `index` along the leading axis (e.g. one frame of a video).
    pub fn outer(&self, index: usize) -> Result<Tensor> {
        let (&lead, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::invalid("outer() on a scalar"))?;
        if index >= lead {
            return Err(Error::invalid(format!("index {index} out of range {lead}")));
        }
        let stride: usize = rest.iter().product();
        Tensor::new(
            rest.to_vec(),
            self.data[index * stride..(index + 1) * stride].to_vec(),
        )
    }

    pub fn outer_slice(&self, index: usize) -> &[f64] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[index * stride..(index + 1) * stride]
    }

    pub fn outer_slice_mut(&mut self, index: usize) -> &mut [f64] {
        let stride: usize = self.shape[1..].iter().product();
        &mut self.data[index * stride..(index + 1) * stride]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            first.expect_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let mut strides = vec![0; out_shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of the broadcast output.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let n: usize = out_shape.iter().product();
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, op, f);
    }
    let shape = broadcast_shape(&a.shape, &b.shape, op)?;
    let mut data = vec![0.0; shape.iter().product()];
    for_each_broadcast(&shape, &a.shape, &b.shape, |i, ia, ib| {
        data[i] = f(a.data[ia], b.data[ib]);
    });
    Ok(Tensor { shape, data })
}

/// Sums `t` down to `shape`, undoing a broadcast.
pub(crate) fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let mut out = Tensor::zeros(shape);
    for_each_broadcast(&t.shape, shape, shape, |i, io, _| {
        out.data[io] += t.data[i];
    });
    out
}

pub(crate) fn expand_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let target = broadcast_shape(&t.shape, shape, "expand")?;
    if target != shape {
        return Err(Error::ShapeMismatch {
            op: "expand",
            lhs: t.shape.clone(),
            rhs: shape.to_vec(),
        });
    }
    let mut data = vec![0.0; shape.iter().product()];
    for_each_broadcast(shape, &t.shape, &t.shape, |i, ia, _| data[i] = t.data[ia]);
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

// ---------------------------------------------------------------------------
// Kernels

/// Defines `$name` as a dispatcher to `$kernel`, running it through an
/// AVX2-enabled copy when the CPU supports it. Only the vector width changes
/// (no fused multiply-add), so both paths give identical bits.
macro_rules! wide_kernel {
    ($(#[$doc:meta])* $name:ident => $kernel:ident($($arg:ident: $ty:ty),*)) => {
        $(#[$doc])*
        pub(crate) fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) {
                    $kernel($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: AVX2 support was checked just above
                    return unsafe { wide($($arg),*) };
                }
            }
            $kernel($($arg),*)
        }
    };
}

wide_kernel!(
    /// `c[m×n] += a[m×k] · b[k×n]`
    gemm_nn => gemm_nn_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize)
);
wide_kernel!(
    /// `c[m×k] += g[m×n] · b[k×n]ᵀ`
    gemm_nt => gemm_nt_kernel(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize)
);
wide_kernel!(
    /// `c[k×n] += a[m×k]ᵀ · g[m×n]`
    gemm_tn => gemm_tn_kernel(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize)
);

#[inline(always)]
fn gemm_nn_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        let mut p = 0;
        // four rows of b per pass over c; per element the summation order is
        // unchanged
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] = crow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
            p += 1;
        }
    }
}

#[inline(always)]
fn dot4(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline(always)]
fn gemm_nt_kernel(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot4(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

#[inline(always)]
fn gemm_tn_kernel(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let crow = &mut c[p * n..(p + 1) * n];
        let mut i = 0;
        while i + 4 <= m {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let g0 = &g[i * n..(i + 1) * n];
            let g1 = &g[(i + 1) * n..(i + 2) * n];
            let g2 = &g[(i + 2) * n..(i + 3) * n];
            let g3 = &g[(i + 3) * n..(i + 4) * n];
            for j in 0..n {
                crow[j] = crow[j] + a0 * g0[j] + a1 * g1[j] + a2 * g2[j] + a3 * g3[j];
            }
            i += 4;
        }
        while i < m {
            let av = a[i * k + p];
            let grow = &g[i * n..(i + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
            i += 1;
        }
    }
}

/// Geometry of a stride-1 "same" 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let hw = g.h * g.w;
    let pad = g.pad();
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * g.w..(y + 1) * g.w];
                    if sy < 0 || sy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for (xo, d) in drow.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *d = if sx < 0 || sx >= g.w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.h * g.w;
    let pad = g.pad();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..g.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for xo in 0..g.w {
                        let sx = xo as isize + dxo;
                        if sx >= 0 && sx < g.w as isize {
                            plane[sy as usize * g.w + sx as usize] += src[y * g.w + xo];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let rows = g.col_rows();
    let mut out = vec![0.0; g.n * g.cout * hw];
    if g.k == 1 {
        for n in 0..g.n {
            let xs = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
            gemm_nn(w, xs, &mut out[n * g.cout * hw..(n + 1) * g.cout * hw], g.cout, g.cin, hw);
        }
        return out;
    }
    let mut col = vec![0.0; rows * hw];
    for n in 0..g.n {
        im2col(&x[n * g.cin * hw..(n + 1) * g.cin * hw], g, &mut col);
        gemm_nn(w, &col, &mut out[n * g.cout * hw..(n + 1) * g.cout * hw], g.cout, rows, hw);
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.h * g.w;
    let rows = g.col_rows();
    let mut dx = want_dx.then(|| vec![0.0; g.n * g.cin * hw]);
    let mut dw = want_dw.then(|| vec![0.0; g.cout * rows]);
    let mut col = vec![0.0; rows * hw];
    let mut dcol = vec![0.0; rows * hw];
    for n in 0..g.n {
        let go = &dout[n * g.cout * hw..(n + 1) * g.cout * hw];
        let xs = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        if let Some(dw) = dw.as_mut() {
            if g.k == 1 {
                gemm_nt(go, xs, dw, g.cout, rows, hw);
            } else {
                im2col(xs, g, &mut col);
                gemm_nt(go, &col, dw, g.cout, rows, hw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * g.cin * hw..(n + 1) * g.cin * hw];
            if g.k == 1 {
                gemm_tn(w, go, dxs, g.cout, rows, hw);
            } else {
                dcol.iter_mut().for_each(|v| *v = 0.0);
                gemm_tn(w, go, &mut dcol, g.cout, rows, hw);
                col2im(&dcol, g, dxs);
            }
        }
    }
    (dx, dw)
}

pub(crate) fn permute(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = t.shape.len();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::invalid(format!(
            "permutation {axes:?} is invalid for rank {nd}"
        )));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(t.data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_add_channel_bias() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3], vec![10., 20., 30.]).unwrap();
        let c = broadcast_binary(&a, &b, "add", |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let back = sum_to_shape(&c, &[3]);
        assert_eq!(back.data(), &[25., 47., 69.]);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        assert!(broadcast_shape(&[2, 3], &[2], "add").is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute(&t, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], 4.0);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn conv_identity_kernel() {
        let g = ConvGeom { n: 1, cin: 1, cout: 1, h: 3, w: 3, k: 3 };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d_forward(&x, &w, &g), x);
    }

    #[test]
    fn item_requires_single_element() {
        assert!(Tensor::zeros(&[2]).item().is_err());
        assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
    }
}
