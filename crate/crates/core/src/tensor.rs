//! Dense kernels used by the network: strided valid convolution and its
//! adjoint (transposed convolution), "same" padded recurrent convolution,
//! affine maps, activations and the two training losses.
//!
//! Every forward kernel comes with an exact backward. The `*_acc` functions
//! work on raw slices and accumulate into their output, which is what the
//! network's step and backward passes use; the [`MapStack`] level wrappers
//! allocate and validate.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Gain of the hidden-unit activation `A * tanh(2u/3)`.
pub const TANH_GAIN: f64 = 1.7159;
const TANH_SLOPE: f64 = 2.0 / 3.0;

/// Probability floor used by [`kl_loss`].
pub const PROB_FLOOR: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub maps: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(maps: usize, height: usize, width: usize) -> Self {
        Shape3 {
            maps,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.maps * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Stack of 2-D feature maps, row-major in map-then-row order.
#[derive(Clone, Debug, PartialEq)]
pub struct MapStack {
    pub maps: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MapStack {
    pub fn zeros(shape: Shape3) -> Self {
        MapStack {
            maps: shape.maps,
            height: shape.height,
            width: shape.width,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return shape_err(format!(
                "map stack {}x{}x{} needs {} values, got {}",
                shape.maps,
                shape.height,
                shape.width,
                shape.len(),
                data.len()
            ));
        }
        Ok(MapStack {
            maps: shape.maps,
            height: shape.height,
            width: shape.width,
            data,
        })
    }

    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.maps, self.height, self.width)
    }

    pub fn dot(&self, other: &MapStack) -> f64 {
        dot(&self.data, &other.data)
    }
}

/// Convolution kernel `k[out][in][ky][kx]` with its strides.
///
/// In valid-convolution mode it maps `in_maps` planes to `out_maps` planes.
/// In transposed mode the same tensor is read as the adjoint and maps
/// `out_maps` planes back to `in_maps` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel4 {
    pub out_maps: usize,
    pub in_maps: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_y: usize,
    pub stride_x: usize,
    pub data: Vec<f64>,
}

impl Kernel4 {
    pub fn zeros(
        out_maps: usize,
        in_maps: usize,
        kh: usize,
        kw: usize,
        stride_y: usize,
        stride_x: usize,
    ) -> Self {
        Kernel4 {
            out_maps,
            in_maps,
            kh,
            kw,
            stride_y,
            stride_x,
            data: vec![0.0; out_maps * in_maps * kh * kw],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Kernel4 {
            data: vec![0.0; self.data.len()],
            ..*self
        }
    }

    /// Output shape of a valid convolution of `input` with this kernel.
    pub fn conv_output(&self, input: Shape3) -> Result<Shape3> {
        if input.maps != self.in_maps {
            return shape_err(format!(
                "convolution expects {} input maps, got {}",
                self.in_maps, input.maps
            ));
        }
        let h = conv_extent(input.height, self.kh, self.stride_y);
        let w = conv_extent(input.width, self.kw, self.stride_x);
        match (h, w) {
            (Some(h), Some(w)) => Ok(Shape3::new(self.out_maps, h, w)),
            _ => shape_err(format!(
                "input {}x{} smaller than kernel {}x{}",
                input.height, input.width, self.kh, self.kw
            )),
        }
    }

    /// Output shape of a transposed convolution of `input` with this kernel.
    pub fn transposed_output(&self, input: Shape3) -> Result<Shape3> {
        if input.maps != self.out_maps {
            return shape_err(format!(
                "transposed convolution expects {} input maps, got {}",
                self.out_maps, input.maps
            ));
        }
        if input.height == 0 || input.width == 0 {
            return shape_err("transposed convolution of an empty map");
        }
        Ok(Shape3::new(
            self.in_maps,
            transposed_extent(input.height, self.kh, self.stride_y),
            transposed_extent(input.width, self.kw, self.stride_x),
        ))
    }

    #[inline]
    fn at(&self, o: usize, i: usize, ky: usize) -> usize {
        ((o * self.in_maps + i) * self.kh + ky) * self.kw
    }
}

/// Dense matrix `w[row][col]`, mapping `cols`-vectors to `rows`-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseWeights {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseWeights {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseWeights {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut w = Self::zeros(n, n);
        for i in 0..n {
            w.data[i * n + i] = 1.0;
        }
        w
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }
}

/// `floor((input - kernel) / stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input < kernel {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

/// `stride * (input - 1) + kernel`.
pub fn transposed_extent(input: usize, kernel: usize, stride: usize) -> usize {
    stride * (input.saturating_sub(1)) + kernel
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// slice kernels

/// `out += conv_valid(x, k)`; shapes are trusted.
pub fn conv_valid_acc(x: &[f64], xs: Shape3, k: &Kernel4, out: &mut [f64], os: Shape3) {
    debug_assert_eq!(x.len(), xs.len());
    debug_assert_eq!(out.len(), os.len());
    let (sy, sx) = (k.stride_y, k.stride_x);
    let ow = os.width;
    for o in 0..k.out_maps {
        let out_map = &mut out[o * os.plane()..(o + 1) * os.plane()];
        for i in 0..k.in_maps {
            let in_map = &x[i * xs.plane()..(i + 1) * xs.plane()];
            for ky in 0..k.kh {
                let krow = &k.data[k.at(o, i, ky)..k.at(o, i, ky) + k.kw];
                for (kx, &w) in krow.iter().enumerate() {
                    for y in 0..os.height {
                        let in_row = &in_map[(y * sy + ky) * xs.width..];
                        let out_row = &mut out_map[y * ow..(y + 1) * ow];
                        if sx == 1 {
                            for (acc, v) in out_row.iter_mut().zip(&in_row[kx..kx + ow]) {
                                *acc += w * v;
                            }
                        } else {
                            for (xo, acc) in out_row.iter_mut().enumerate() {
                                *acc += w * in_row[xo * sx + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out += conv_transposed(x, k)`; `xs` has `k.out_maps` maps and `os` is the
/// transposed output shape.
pub fn conv_transposed_acc(x: &[f64], xs: Shape3, k: &Kernel4, out: &mut [f64], os: Shape3) {
    debug_assert_eq!(x.len(), xs.len());
    debug_assert_eq!(out.len(), os.len());
    let (sy, sx) = (k.stride_y, k.stride_x);
    let iw = xs.width;
    for o in 0..k.out_maps {
        let in_map = &x[o * xs.plane()..(o + 1) * xs.plane()];
        for i in 0..k.in_maps {
            let out_map = &mut out[i * os.plane()..(i + 1) * os.plane()];
            for ky in 0..k.kh {
                let krow = &k.data[k.at(o, i, ky)..k.at(o, i, ky) + k.kw];
                for (kx, &w) in krow.iter().enumerate() {
                    for y in 0..xs.height {
                        let in_row = &in_map[y * iw..(y + 1) * iw];
                        let out_row = &mut out_map[(y * sy + ky) * os.width..];
                        if sx == 1 {
                            for (acc, v) in out_row[kx..kx + iw].iter_mut().zip(in_row) {
                                *acc += w * v;
                            }
                        } else {
                            for (xi, v) in in_row.iter().enumerate() {
                                out_row[xi * sx + kx] += w * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `gk += d<g, conv_valid(x, k)>/dk`, i.e. the kernel gradient of a valid
/// convolution of `x` whose output gradient is `g`.
pub fn kernel_grad_acc(x: &[f64], xs: Shape3, g: &[f64], gs: Shape3, k: &Kernel4, gk: &mut [f64]) {
    debug_assert_eq!(gk.len(), k.data.len());
    let (sy, sx) = (k.stride_y, k.stride_x);
    let gw = gs.width;
    for o in 0..k.out_maps {
        let g_map = &g[o * gs.plane()..(o + 1) * gs.plane()];
        for i in 0..k.in_maps {
            let in_map = &x[i * xs.plane()..(i + 1) * xs.plane()];
            for ky in 0..k.kh {
                let base = k.at(o, i, ky);
                for kx in 0..k.kw {
                    let mut acc = 0.0;
                    for y in 0..gs.height {
                        let in_row = &in_map[(y * sy + ky) * xs.width..];
                        let g_row = &g_map[y * gw..(y + 1) * gw];
                        if sx == 1 {
                            acc += dot(g_row, &in_row[kx..kx + gw]);
                        } else {
                            for (xo, gv) in g_row.iter().enumerate() {
                                acc += gv * in_row[xo * sx + kx];
                            }
                        }
                    }
                    gk[base + kx] += acc;
                }
            }
        }
    }
}

/// Per-map sums of `g`, accumulated into `gb`.
pub fn bias_grad_acc(g: &[f64], gs: Shape3, gb: &mut [f64]) {
    for (m, b) in gb.iter_mut().enumerate().take(gs.maps) {
        *b += g[m * gs.plane()..(m + 1) * gs.plane()].iter().sum::<f64>();
    }
}

/// Adds the per-map bias to every element of the map.
pub fn add_map_bias(out: &mut [f64], os: Shape3, bias: &[f64]) {
    for (m, &b) in bias.iter().enumerate().take(os.maps) {
        for v in &mut out[m * os.plane()..(m + 1) * os.plane()] {
            *v += b;
        }
    }
}

/// Shape after zero padding for a stride-1 "same" convolution: `kh - 1`
/// rows and `kw - 1` columns, of which `(k - 1) / 2` go before the data.
pub fn same_padded_shape(xs: Shape3, kh: usize, kw: usize) -> Shape3 {
    Shape3::new(xs.maps, xs.height + kh - 1, xs.width + kw - 1)
}

fn same_offsets(kh: usize, kw: usize) -> (usize, usize) {
    ((kh - 1) / 2, (kw - 1) / 2)
}

pub fn pad_same(x: &[f64], xs: Shape3, kh: usize, kw: usize) -> Vec<f64> {
    let ps = same_padded_shape(xs, kh, kw);
    let (top, left) = same_offsets(kh, kw);
    let mut padded = vec![0.0; ps.len()];
    for m in 0..xs.maps {
        for y in 0..xs.height {
            let src = &x[(m * xs.height + y) * xs.width..][..xs.width];
            let dst = &mut padded[(m * ps.height + y + top) * ps.width + left..][..xs.width];
            dst.copy_from_slice(src);
        }
    }
    padded
}

fn crop_same_acc(padded: &[f64], xs: Shape3, kh: usize, kw: usize, out: &mut [f64]) {
    let ps = same_padded_shape(xs, kh, kw);
    let (top, left) = same_offsets(kh, kw);
    for m in 0..xs.maps {
        for y in 0..xs.height {
            let src = &padded[(m * ps.height + y + top) * ps.width + left..][..xs.width];
            let dst = &mut out[(m * xs.height + y) * xs.width..][..xs.width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// `out += conv_same(x, k)` for a stride-1 kernel; output shape equals the
/// input plane shape with `k.out_maps` maps.
pub fn conv_same_acc(x: &[f64], xs: Shape3, k: &Kernel4, out: &mut [f64]) {
    let ps = same_padded_shape(xs, k.kh, k.kw);
    let padded = pad_same(x, xs, k.kh, k.kw);
    conv_valid_acc(
        &padded,
        ps,
        k,
        out,
        Shape3::new(k.out_maps, xs.height, xs.width),
    );
}

/// Backward of [`conv_same_acc`]: accumulates into `gx` and, when present, `gk`.
pub fn conv_same_backward_acc(
    x: &[f64],
    xs: Shape3,
    k: &Kernel4,
    g: &[f64],
    gx: &mut [f64],
    gk: Option<&mut [f64]>,
) {
    let ps = same_padded_shape(xs, k.kh, k.kw);
    let gs = Shape3::new(k.out_maps, xs.height, xs.width);
    let mut g_padded = vec![0.0; ps.len()];
    conv_transposed_acc(g, gs, k, &mut g_padded, ps);
    crop_same_acc(&g_padded, xs, k.kh, k.kw, gx);
    if let Some(gk) = gk {
        let padded = pad_same(x, xs, k.kh, k.kw);
        kernel_grad_acc(&padded, ps, g, gs, k, gk);
    }
}

/// `out += w x`.
pub fn affine_acc(w: &DenseWeights, x: &[f64], out: &mut [f64]) {
    for (r, acc) in out.iter_mut().enumerate().take(w.rows) {
        *acc += dot(&w.data[r * w.cols..(r + 1) * w.cols], x);
    }
}

/// `gx += w^T g`.
pub fn affine_transpose_acc(w: &DenseWeights, g: &[f64], gx: &mut [f64]) {
    for (r, &gr) in g.iter().enumerate().take(w.rows) {
        for (acc, wv) in gx.iter_mut().zip(&w.data[r * w.cols..(r + 1) * w.cols]) {
            *acc += gr * wv;
        }
    }
}

/// `gw += g x^T`.
pub fn outer_acc(g: &[f64], x: &[f64], gw: &mut [f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        for (acc, xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *acc += gr * xv;
        }
    }
}

pub fn add_assign(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

// ---------------------------------------------------------------------------
// validated wrappers

fn check_bias(bias: &[f64], maps: usize) -> Result<()> {
    if bias.len() != maps {
        return shape_err(format!("bias has {} entries for {} maps", bias.len(), maps));
    }
    Ok(())
}

fn check_kernel(k: &Kernel4) -> Result<()> {
    if k.data.len() != k.out_maps * k.in_maps * k.kh * k.kw {
        return shape_err("kernel data length does not match its extents");
    }
    if k.stride_x == 0 || k.stride_y == 0 {
        return Err(Error::Config("kernel stride must be positive".into()));
    }
    Ok(())
}

/// Strided valid convolution plus a per-output-map bias.
pub fn conv_valid(input: &MapStack, k: &Kernel4, bias: &[f64]) -> Result<MapStack> {
    check_kernel(k)?;
    let os = k.conv_output(input.shape())?;
    check_bias(bias, os.maps)?;
    let mut out = vec![0.0; os.len()];
    conv_valid_acc(&input.data, input.shape(), k, &mut out, os);
    add_map_bias(&mut out, os, bias);
    MapStack::from_vec(os, out)
}

/// Transposed convolution: the linear adjoint of [`conv_valid`] with the
/// same kernel, plus a per-output-map bias.
pub fn conv_transposed(input: &MapStack, k: &Kernel4, bias: &[f64]) -> Result<MapStack> {
    check_kernel(k)?;
    let os = k.transposed_output(input.shape())?;
    check_bias(bias, os.maps)?;
    let mut out = vec![0.0; os.len()];
    conv_transposed_acc(&input.data, input.shape(), k, &mut out, os);
    add_map_bias(&mut out, os, bias);
    MapStack::from_vec(os, out)
}

/// Stride-1 convolution with zero padding so the output keeps the input's
/// spatial extents.
pub fn conv_same(input: &MapStack, k: &Kernel4, bias: &[f64]) -> Result<MapStack> {
    check_kernel(k)?;
    if k.stride_x != 1 || k.stride_y != 1 {
        return Err(Error::Config(
            "same-padded convolution needs stride 1".into(),
        ));
    }
    if input.maps != k.in_maps {
        return shape_err(format!(
            "convolution expects {} input maps, got {}",
            k.in_maps, input.maps
        ));
    }
    check_bias(bias, k.out_maps)?;
    let os = Shape3::new(k.out_maps, input.height, input.width);
    let mut out = vec![0.0; os.len()];
    conv_same_acc(&input.data, input.shape(), k, &mut out);
    add_map_bias(&mut out, os, bias);
    MapStack::from_vec(os, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub grad_input: MapStack,
    pub grad_kernel: Kernel4,
    pub grad_bias: Vec<f64>,
}

/// Gradients of `<grad_out, conv_valid(input, k, b)>` with respect to the
/// input, the kernel and the bias.
pub fn conv_backward(input: &MapStack, k: &Kernel4, grad_out: &MapStack) -> Result<ConvGrads> {
    check_kernel(k)?;
    let os = k.conv_output(input.shape())?;
    if grad_out.shape() != os {
        return shape_err("output gradient does not match the convolution output");
    }
    let mut gx = vec![0.0; input.data.len()];
    conv_transposed_acc(&grad_out.data, os, k, &mut gx, input.shape());
    let mut gk = k.zeros_like();
    kernel_grad_acc(
        &input.data,
        input.shape(),
        &grad_out.data,
        os,
        k,
        &mut gk.data,
    );
    let mut gb = vec![0.0; os.maps];
    bias_grad_acc(&grad_out.data, os, &mut gb);
    Ok(ConvGrads {
        grad_input: MapStack::from_vec(input.shape(), gx)?,
        grad_kernel: gk,
        grad_bias: gb,
    })
}

/// Gradients of `<grad_out, conv_transposed(input, k, b)>`.
pub fn conv_transposed_backward(
    input: &MapStack,
    k: &Kernel4,
    grad_out: &MapStack,
) -> Result<ConvGrads> {
    check_kernel(k)?;
    let os = k.transposed_output(input.shape())?;
    if grad_out.shape() != os {
        return shape_err("output gradient does not match the transposed output");
    }
    let mut gx = vec![0.0; input.data.len()];
    conv_valid_acc(&grad_out.data, os, k, &mut gx, input.shape());
    // the adjoint's kernel gradient is the forward kernel gradient with the
    // roles of input and output gradient swapped
    let mut gk = k.zeros_like();
    kernel_grad_acc(
        &grad_out.data,
        os,
        &input.data,
        input.shape(),
        k,
        &mut gk.data,
    );
    let mut gb = vec![0.0; os.maps];
    bias_grad_acc(&grad_out.data, os, &mut gb);
    Ok(ConvGrads {
        grad_input: MapStack::from_vec(input.shape(), gx)?,
        grad_kernel: gk,
        grad_bias: gb,
    })
}

/// `y = w x + b`.
pub fn affine(w: &DenseWeights, x: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() {
        return shape_err(format!(
            "{}x{} weights applied to a {}-vector",
            w.rows,
            w.cols,
            x.len()
        ));
    }
    if bias.len() != w.rows {
        return shape_err(format!(
            "bias has {} entries for {} rows",
            bias.len(),
            w.rows
        ));
    }
    let mut out = bias.to_vec();
    affine_acc(w, x, &mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrads {
    pub grad_input: Vec<f64>,
    pub grad_weights: DenseWeights,
    pub grad_bias: Vec<f64>,
}

pub fn affine_backward(w: &DenseWeights, x: &[f64], grad_out: &[f64]) -> Result<AffineGrads> {
    if w.cols != x.len() || w.rows != grad_out.len() {
        return shape_err("affine backward shapes disagree with the weights");
    }
    let mut gx = vec![0.0; x.len()];
    affine_transpose_acc(w, grad_out, &mut gx);
    let mut gw = w.zeros_like();
    outer_acc(grad_out, x, &mut gw.data);
    Ok(AffineGrads {
        grad_input: gx,
        grad_weights: gw,
        grad_bias: grad_out.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// activations

#[inline]
pub fn scaled_tanh(u: f64) -> f64 {
    TANH_GAIN * (TANH_SLOPE * u).tanh()
}

/// Derivative of [`scaled_tanh`] expressed through its output `v`.
#[inline]
pub fn scaled_tanh_deriv_from_output(v: f64) -> f64 {
    let t = v / TANH_GAIN;
    TANH_GAIN * TANH_SLOPE * (1.0 - t * t)
}

#[inline]
pub fn scaled_tanh_deriv(u: f64) -> f64 {
    scaled_tanh_deriv_from_output(scaled_tanh(u))
}

#[inline]
pub fn out_tanh(u: f64) -> f64 {
    u.tanh()
}

#[inline]
pub fn out_tanh_deriv_from_output(v: f64) -> f64 {
    1.0 - v * v
}

#[inline]
pub fn out_tanh_deriv(u: f64) -> f64 {
    out_tanh_deriv_from_output(u.tanh())
}

fn check_groups(len: usize, group: usize) -> Result<()> {
    if group == 0 {
        return shape_err("softmax group must not be empty");
    }
    if len % group != 0 {
        return shape_err(format!("{len} units do not split into groups of {group}"));
    }
    Ok(())
}

/// Softmax applied independently to consecutive groups of `group` units.
pub fn softmax_groups(u: &[f64], group: usize) -> Result<Vec<f64>> {
    check_groups(u.len(), group)?;
    let mut out = vec![0.0; u.len()];
    softmax_groups_into(u, group, &mut out);
    Ok(out)
}

pub(crate) fn softmax_groups_into(u: &[f64], group: usize, out: &mut [f64]) {
    for (src, dst) in u.chunks(group).zip(out.chunks_mut(group)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
}

/// Vector-Jacobian product of the grouped softmax: returns `dL/du` given
/// the probabilities `p` and `dL/dp`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64], group: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    softmax_backward_acc(p, grad_p, group, &mut out);
    out
}

pub(crate) fn softmax_backward_acc(p: &[f64], grad_p: &[f64], group: usize, out: &mut [f64]) {
    for ((pg, gg), og) in p
        .chunks(group)
        .zip(grad_p.chunks(group))
        .zip(out.chunks_mut(group))
    {
        let inner = dot(pg, gg);
        for ((o, &pi), &gi) in og.iter_mut().zip(pg).zip(gg) {
            *o += pi * (gi - inner);
        }
    }
}

// ---------------------------------------------------------------------------
// losses

/// `sum (pred - target)^2` and its gradient with respect to `pred`.
pub fn sse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return shape_err(format!(
            "sse over {} predictions and {} targets",
            pred.len(),
            target.len()
        ));
    }
    let mut grad = Vec::with_capacity(pred.len());
    let mut loss = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        loss += d * d;
        grad.push(2.0 * d);
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlLoss {
    pub value: f64,
    /// Gradient with respect to the predicted probabilities.
    pub grad: Vec<f64>,
    /// Number of predicted probabilities clamped at [`PROB_FLOOR`] under a
    /// positive target.
    pub clamped: usize,
}

/// `sum target * ln(target / pred)` with `0 ln(0/y) = 0`.
pub fn kl_loss(target: &[f64], pred: &[f64]) -> Result<KlLoss> {
    if pred.len() != target.len() {
        return shape_err(format!(
            "kl over {} predictions and {} targets",
            pred.len(),
            target.len()
        ));
    }
    let mut value = 0.0;
    let mut clamped = 0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&t, &p) in target.iter().zip(pred) {
        if t > 0.0 {
            let q = if p < PROB_FLOOR {
                clamped += 1;
                PROB_FLOOR
            } else {
                p
            };
            value += t * (t / q).ln();
            grad.push(-t / q);
        } else {
            grad.push(0.0);
        }
    }
    Ok(KlLoss {
        value,
        grad,
        clamped,
    })
}

/// Value of [`kl_loss`] without the gradient.
pub fn kl_value(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, &p)| t * (t / p.max(PROB_FLOOR)).ln())
        .sum()
}

/// Groups whose target mass is this close to one count as normalized.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Gradient of the grouped KL with respect to the softmax logits:
/// `p_i * sum_group(target) - target_i`, accumulated into `out`.
/// A normalized group uses `p_i - target_i` so that a perfect prediction
/// has an exactly zero gradient.
pub fn kl_logit_grad_acc(target: &[f64], p: &[f64], group: usize, scale: f64, out: &mut [f64]) {
    for ((tg, pg), og) in target
        .chunks(group)
        .zip(p.chunks(group))
        .zip(out.chunks_mut(group))
    {
        let mut mass: f64 = tg.iter().sum();
        if (mass - 1.0).abs() < MASS_TOLERANCE {
            mass = 1.0;
        }
        for ((o, &pi), &ti) in og.iter_mut().zip(pg).zip(tg) {
            *o += scale * (pi * mass - ti);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(rng: &mut ChaCha8Rng, s: Shape3) -> MapStack {
        MapStack::from_vec(
            s,
            (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_kernel(
        rng: &mut ChaCha8Rng,
        o: usize,
        i: usize,
        kh: usize,
        kw: usize,
        sy: usize,
        sx: usize,
    ) -> Kernel4 {
        let mut k = Kernel4::zeros(o, i, kh, kw, sy, sx);
        k.data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        k
    }

    /// Direct definition of a valid strided correlation, used as an oracle.
    fn conv_oracle(x: &MapStack, k: &Kernel4) -> MapStack {
        let oh = (x.height - k.kh) / k.stride_y + 1;
        let ow = (x.width - k.kw) / k.stride_x + 1;
        let mut out = MapStack::zeros(Shape3::new(k.out_maps, oh, ow));
        for o in 0..k.out_maps {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for i in 0..k.in_maps {
                        for ky in 0..k.kh {
                            for kx in 0..k.kw {
                                let w = k.data[((o * k.in_maps + i) * k.kh + ky) * k.kw + kx];
                                let v = x.data[(i * x.height + y * k.stride_y + ky) * x.width
                                    + xx * k.stride_x
                                    + kx];
                                s += w * v;
                            }
                        }
                    }
                    out.data[(o * oh + y) * ow + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn table_shapes() {
        let k = Kernel4::zeros(4, 1, 5, 5, 1, 1);
        assert_eq!(
            k.conv_output(Shape3::new(1, 48, 64)).unwrap(),
            Shape3::new(4, 44, 60)
        );
        let k = Kernel4::zeros(8, 4, 4, 4, 2, 2);
        assert_eq!(
            k.conv_output(Shape3::new(4, 44, 60)).unwrap(),
            Shape3::new(8, 21, 29)
        );
        assert_eq!(
            k.transposed_output(Shape3::new(8, 21, 29)).unwrap(),
            Shape3::new(4, 44, 60)
        );
        let k = Kernel4::zeros(12, 8, 5, 5, 2, 2);
        assert_eq!(
            k.conv_output(Shape3::new(8, 21, 29)).unwrap(),
            Shape3::new(12, 9, 13)
        );
        assert_eq!(
            k.transposed_output(Shape3::new(12, 9, 13)).unwrap(),
            Shape3::new(8, 21, 29)
        );
        let k = Kernel4::zeros(10, 12, 9, 13, 1, 1);
        assert_eq!(
            k.conv_output(Shape3::new(12, 9, 13)).unwrap(),
            Shape3::new(10, 1, 1)
        );
        assert_eq!(
            k.transposed_output(Shape3::new(10, 1, 1)).unwrap(),
            Shape3::new(12, 9, 13)
        );
    }

    #[test]
    fn dimension_errors() {
        let k = Kernel4::zeros(2, 3, 3, 3, 1, 1);
        let x = MapStack::zeros(Shape3::new(2, 8, 8));
        assert!(matches!(
            conv_valid(&x, &k, &[0.0; 2]),
            Err(Error::Shape(_))
        ));
        let x = MapStack::zeros(Shape3::new(3, 2, 8));
        assert!(conv_valid(&x, &k, &[0.0; 2]).is_err());
        let x = MapStack::zeros(Shape3::new(3, 8, 8));
        assert!(conv_transposed(&x, &k, &[0.0; 3]).is_err());
        assert!(conv_valid(&x, &k, &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_kernel_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_stack(&mut rng, Shape3::new(2, 9, 11));
        let k = Kernel4::zeros(3, 2, 3, 2, 2, 1);
        let y = conv_valid(&x, &k, &[0.0; 3]).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(sy, sx) in &[(1, 1), (2, 2), (1, 3), (2, 1)] {
            let x = random_stack(&mut rng, Shape3::new(3, 11, 12));
            let k = random_kernel(&mut rng, 2, 3, 3, 4, sy, sx);
            let got = conv_valid(&x, &k, &[0.0; 2]).unwrap();
            let want = conv_oracle(&x, &k);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bias_is_per_map() {
        let x = MapStack::zeros(Shape3::new(1, 4, 4));
        let k = Kernel4::zeros(2, 1, 2, 2, 1, 1);
        let y = conv_valid(&x, &k, &[0.5, -1.0]).unwrap();
        assert!(y.data[..9].iter().all(|&v| v == 0.5));
        assert!(y.data[9..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (sy, sx) = (rng.random_range(1..4), rng.random_range(1..4));
            let (kh, kw) = (rng.random_range(1..6), rng.random_range(1..6));
            let (i, o) = (rng.random_range(1..4), rng.random_range(1..4));
            let h = kh + sy * rng.random_range(0..5);
            let w = kw + sx * rng.random_range(0..5);
            let x = random_stack(&mut rng, Shape3::new(i, h, w));
            let k = random_kernel(&mut rng, o, i, kh, kw, sy, sx);
            let y_shape = k.conv_output(x.shape()).unwrap();
            let y = random_stack(&mut rng, y_shape);
            let lhs = conv_valid(&x, &k, &vec![0.0; o]).unwrap().dot(&y);
            let back = conv_transposed(&y, &k, &vec![0.0; i]).unwrap();
            assert_eq!(back.shape(), x.shape());
            let rhs = x.dot(&back);
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_backward_zero_and_scalar() {
        let x = MapStack::from_vec(Shape3::new(1, 1, 1), vec![3.0]).unwrap();
        let mut k = Kernel4::zeros(1, 1, 1, 1, 1, 1);
        k.data[0] = 0.7;
        let g = MapStack::from_vec(Shape3::new(1, 1, 1), vec![-2.0]).unwrap();
        let grads = conv_backward(&x, &k, &g).unwrap();
        assert_eq!(grads.grad_kernel.data, vec![-6.0]);
        assert_eq!(grads.grad_bias, vec![-2.0]);
        assert!((grads.grad_input.data[0] + 1.4).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_stack(&mut rng, Shape3::new(2, 7, 7));
        let k = random_kernel(&mut rng, 3, 2, 3, 3, 2, 2);
        let g = MapStack::zeros(k.conv_output(x.shape()).unwrap());
        let grads = conv_backward(&x, &k, &g).unwrap();
        assert!(grads.grad_input.data.iter().all(|&v| v == 0.0));
        assert!(grads.grad_kernel.data.iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.iter().all(|&v| v == 0.0));
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_stack(&mut rng, Shape3::new(2, 9, 9));
        let k = random_kernel(&mut rng, 3, 2, 3, 2, 2, 1);
        let b = vec![0.1, -0.2, 0.3];
        let g = random_stack(&mut rng, k.conv_output(x.shape()).unwrap());
        let f = |x: &MapStack, k: &Kernel4, b: &[f64]| conv_valid(x, k, b).unwrap().dot(&g);
        let grads = conv_backward(&x, &k, &g).unwrap();
        let eps = 1e-5;
        for idx in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[idx] += eps;
            xm.data[idx] -= eps;
            let num = (f(&xp, &k, &b) - f(&xm, &k, &b)) / (2.0 * eps);
            assert!(rel(num, grads.grad_input.data[idx]) < 1e-6);
        }
        for idx in 0..k.data.len() {
            let (mut kp, mut km) = (k.clone(), k.clone());
            kp.data[idx] += eps;
            km.data[idx] -= eps;
            let num = (f(&x, &kp, &b) - f(&x, &km, &b)) / (2.0 * eps);
            assert!(rel(num, grads.grad_kernel.data[idx]) < 1e-6);
        }
        for idx in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[idx] += eps;
            bm[idx] -= eps;
            let num = (f(&x, &k, &bp) - f(&x, &k, &bm)) / (2.0 * eps);
            assert!(rel(num, grads.grad_bias[idx]) < 1e-6);
        }
        // input gradient is the transposed convolution of the output gradient
        let t = conv_transposed(&g, &k, &[0.0, 0.0]).unwrap();
        assert_eq!(t.data, grads.grad_input.data);
    }

    #[test]
    fn transposed_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = random_kernel(&mut rng, 2, 3, 4, 3, 2, 2);
        let x = random_stack(&mut rng, Shape3::new(2, 3, 4));
        let g = random_stack(&mut rng, k.transposed_output(x.shape()).unwrap());
        let b = vec![0.0; 3];
        let f = |x: &MapStack, k: &Kernel4| conv_transposed(x, k, &b).unwrap().dot(&g);
        let grads = conv_transposed_backward(&x, &k, &g).unwrap();
        let eps = 1e-5;
        for idx in 0..k.data.len() {
            let (mut kp, mut km) = (k.clone(), k.clone());
            kp.data[idx] += eps;
            km.data[idx] -= eps;
            let num = (f(&x, &kp) - f(&x, &km)) / (2.0 * eps);
            assert!(rel(num, grads.grad_kernel.data[idx]) < 1e-6);
        }
        for idx in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[idx] += eps;
            xm.data[idx] -= eps;
            let num = (f(&xp, &k) - f(&xm, &k)) / (2.0 * eps);
            assert!(rel(num, grads.grad_input.data[idx]) < 1e-6);
        }
    }

    #[test]
    fn same_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_stack(&mut rng, Shape3::new(2, 5, 6));
        let k = random_kernel(&mut rng, 2, 2, 2, 2, 1, 1);
        let g = random_stack(&mut rng, Shape3::new(2, 5, 6));
        let f = |x: &MapStack, k: &Kernel4| conv_same(x, k, &[0.0, 0.0]).unwrap().dot(&g);
        let mut gx = vec![0.0; x.data.len()];
        let mut gk = vec![0.0; k.data.len()];
        conv_same_backward_acc(&x.data, x.shape(), &k, &g.data, &mut gx, Some(&mut gk));
        let eps = 1e-5;
        for idx in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[idx] += eps;
            xm.data[idx] -= eps;
            assert!(rel((f(&xp, &k) - f(&xm, &k)) / (2.0 * eps), gx[idx]) < 1e-6);
        }
        for idx in 0..k.data.len() {
            let (mut kp, mut km) = (k.clone(), k.clone());
            kp.data[idx] += eps;
            km.data[idx] -= eps;
            assert!(rel((f(&x, &kp) - f(&x, &km)) / (2.0 * eps), gk[idx]) < 1e-6);
        }
    }

    #[test]
    fn same_conv_keeps_extent_and_pads_after() {
        // 2x2 kernel reads (y, x), (y, x+1), (y+1, x), (y+1, x+1)
        let x = MapStack::from_vec(Shape3::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut k = Kernel4::zeros(1, 1, 2, 2, 1, 1);
        k.data = vec![1.0, 10.0, 100.0, 1000.0];
        let y = conv_same(&x, &k, &[0.0]).unwrap();
        assert_eq!(y.data, vec![4321.0, 402.0, 43.0, 4.0]);
    }

    #[test]
    fn affine_cases() {
        let x = vec![0.5, -1.0, 2.0];
        assert_eq!(
            affine(&DenseWeights::identity(3), &x, &[0.0; 3]).unwrap(),
            x
        );
        let w = DenseWeights::zeros(10, 20);
        assert_eq!(affine(&w, &[0.0; 20], &[0.0; 10]).unwrap().len(), 10);
        assert!(affine(&w, &[0.0; 19], &[0.0; 10]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = DenseWeights::zeros(4, 3);
        w.data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let b = vec![0.1, 0.2, 0.3, 0.4];
        let g: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |w: &DenseWeights, x: &[f64], b: &[f64]| dot(&affine(w, x, b).unwrap(), &g);
        let grads = affine_backward(&w, &x, &g).unwrap();
        let eps = 1e-5;
        for idx in 0..w.data.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data[idx] += eps;
            wm.data[idx] -= eps;
            let num = (f(&wp, &x, &b) - f(&wm, &x, &b)) / (2.0 * eps);
            assert!((num - grads.grad_weights.data[idx]).abs() < 1e-8);
        }
        for idx in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += eps;
            xm[idx] -= eps;
            let num = (f(&w, &xp, &b) - f(&w, &xm, &b)) / (2.0 * eps);
            assert!((num - grads.grad_input[idx]).abs() < 1e-8);
        }
        assert_eq!(grads.grad_bias, g);
    }

    #[test]
    fn activations() {
        assert_eq!(scaled_tanh(0.0), 0.0);
        assert_eq!(out_tanh(0.0), 0.0);
        assert!((scaled_tanh(1.5) - 1.7159 * 1.0f64.tanh()).abs() < 1e-15);
        assert!((scaled_tanh(1.5) - 1.3068).abs() < 1e-3);
        for &u in &[0.1, 0.7, 2.0, 5.0, -3.3] {
            assert_eq!(scaled_tanh(-u), -scaled_tanh(u));
            assert_eq!(out_tanh(-u), -out_tanh(u));
            let eps = 1e-6;
            let num = (scaled_tanh(u + eps) - scaled_tanh(u - eps)) / (2.0 * eps);
            assert!((num - scaled_tanh_deriv(u)).abs() < 1e-8);
            let num = (out_tanh(u + eps) - out_tanh(u - eps)) / (2.0 * eps);
            assert!((num - out_tanh_deriv(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_properties() {
        let p = softmax_groups(&[0.0; 10], 10).unwrap();
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let u: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let p = softmax_groups(&u, 10).unwrap();
        assert!((p[..10].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[10..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = u.iter().map(|v| v + 5.0).collect();
        let q = softmax_groups(&shifted, 10).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(softmax_groups(&u, 0).is_err());
        assert!(softmax_groups(&u, 7).is_err());
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let u: Vec<f64> = (0..20).map(|i| (i as f64 * 1.3).cos()).collect();
        let g: Vec<f64> = (0..20).map(|i| (i as f64 * 0.61).sin()).collect();
        let p = softmax_groups(&u, 10).unwrap();
        let du = softmax_backward(&p, &g, 10);
        let eps = 1e-6;
        for idx in 0..20 {
            let (mut up, mut um) = (u.clone(), u.clone());
            up[idx] += eps;
            um[idx] -= eps;
            let fp = dot(&softmax_groups(&up, 10).unwrap(), &g);
            let fm = dot(&softmax_groups(&um, 10).unwrap(), &g);
            assert!(((fp - fm) / (2.0 * eps) - du[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn losses() {
        let (l, g) = sse_loss(&[0.0], &[1.0]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![-2.0]);
        assert_eq!(sse_loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap().0, 0.0);
        assert!(sse_loss(&[0.0], &[0.0, 1.0]).is_err());

        let t = softmax_groups(&[0.2, -0.1, 0.5, 1.0], 4).unwrap();
        assert_eq!(kl_loss(&t, &t).unwrap().value, 0.0);

        // uniform target against a smoothed one-hot, summed term by term
        let target = vec![0.1; 10];
        let mut pred = vec![0.01; 10];
        pred[3] = 0.91;
        let oracle: f64 = (0..10).map(|i| 0.1 * (0.1f64 / pred[i]).ln()).sum();
        let kl = kl_loss(&target, &pred).unwrap();
        assert!((kl.value - oracle).abs() < 1e-14);
        assert!(kl.value > 0.0);
        assert_eq!(kl.clamped, 0);

        let kl = kl_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(kl.clamped, 1);
        assert!(kl.value.is_finite());
        // zero target terms contribute nothing even when the prediction is zero
        assert_eq!(kl_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap().value, 0.0);
    }

    #[test]
    fn kl_logit_gradient_is_softmax_composite() {
        let u: Vec<f64> = (0..20).map(|i| (i as f64 * 0.9).sin()).collect();
        let t = softmax_groups(&u.iter().map(|v| v * -0.5).collect::<Vec<_>>(), 10).unwrap();
        let p = softmax_groups(&u, 10).unwrap();
        let kl = kl_loss(&t, &p).unwrap();
        let via_chain = softmax_backward(&p, &kl.grad, 10);
        let mut direct = vec![0.0; 20];
        kl_logit_grad_acc(&t, &p, 10, 1.0, &mut direct);
        for (a, b) in via_chain.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
