//! Dense (channel, row, column) tensors and the handful of kernels the codec
//! and the reformation operations need.
//!
//! Convolutions are lowered to im2col + GEMM over fixed-size row chunks. The
//! chunk partition depends only on the problem shape, so results are
//! bit-identical no matter how many worker threads rayon uses.

use std::fmt;
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper bound on the im2col scratch buffer per chunk, in elements.
const CHUNK_ELEMS: usize = 1 << 22;

/// Rank-3 activation tensor stored row-major in (channel, row, column) order.
#[derive(Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for FeatureMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("shape", &(self.channels, self.height, self.width))
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::shape(
                "FeatureMap::new",
                format!("{channels}x{height}x{width} ({expected} values)"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: T) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Converts every element to another scalar type, rounding if narrower.
    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    /// Largest elementwise absolute difference; `None` when dims differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if !self.same_dims(other) {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }

    /// `weight * self + (1 - weight) * other`.
    pub fn lerp(&self, other: &Self, weight: T) -> Result<Self> {
        if !self.same_dims(other) {
            return Err(Error::shape("lerp", self.shape_str(), other.shape_str()));
        }
        let rest = T::one() - weight;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| weight * a + rest * b).collect(),
            ..*self
        })
    }

    /// Channel-wise concatenation `[self ∥ other]`.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape("concat_channels", self.shape_str(), other.shape_str()));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Crops the spatial window `[top, top+height) x [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(
                "crop",
                format!("window {height}x{width} at ({top},{left}) inside {}", self.shape_str()),
                self.shape_str(),
            ));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let plane = self.channel(c);
            for y in top..top + height {
                data.extend_from_slice(&plane[y * self.width + left..y * self.width + left + width]);
            }
        }
        Self::new(self.channels, height, width, data)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Convolution filter bank `(out, in, kh, kw)` with optional per-output bias.
#[derive(Clone, PartialEq)]
pub struct Kernel4D<T> {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    data: Vec<T>,
    bias: Option<Vec<T>>,
}

impl<T: fmt::Debug> fmt::Debug for Kernel4D<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel4D")
            .field("shape", &(self.out_channels, self.in_channels, self.kh, self.kw))
            .field("bias", &self.bias.is_some())
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Kernel4D<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        data: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        let expected = out_channels * in_channels * kh * kw;
        if data.len() != expected {
            return Err(Error::shape(
                "Kernel4D::new",
                format!("{out_channels}x{in_channels}x{kh}x{kw} ({expected} values)"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::shape("Kernel4D::new", format!("bias of {out_channels}"), format!("bias of {}", b.len())));
            }
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
            bias,
        })
    }

    pub fn from_fn(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(out_channels * in_channels * kh * kw);
        for o in 0..out_channels {
            for i in 0..in_channels {
                for y in 0..kh {
                    for x in 0..kw {
                        data.push(f(o, i, y, x));
                    }
                }
            }
        }
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
            bias: None,
        }
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Result<Self> {
        if bias.len() != self.out_channels {
            return Err(Error::shape(
                "Kernel4D::with_bias",
                format!("bias of {}", self.out_channels),
                format!("bias of {}", bias.len()),
            ));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn kh(&self) -> usize {
        self.kh
    }

    #[inline]
    pub fn kw(&self) -> usize {
        self.kw
    }

    /// `(out, in, kh, kw)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.out_channels, self.in_channels, self.kh, self.kw)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    #[inline]
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    /// The `o`-th filter, laid out `(in, kh, kw)`.
    pub fn filter(&self, o: usize) -> &[T] {
        let n = self.filter_len();
        &self.data[o * n..(o + 1) * n]
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, y: usize, x: usize) -> T {
        self.data[((o * self.in_channels + i) * self.kh + y) * self.kw + x]
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}x{}", self.out_channels, self.in_channels, self.kh, self.kw)
    }
}

/// Spatial padding applied before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding ("valid" convolution).
    Valid,
    /// Pad every border with `n` zeros.
    Zero(usize),
    /// Mirror `n` pixels at every border, excluding the edge pixel itself.
    Reflect(usize),
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Zero(n) | Padding::Reflect(n) => n,
        }
    }
}

/// Reflection index for `i` in `[-pad, len + pad)`. A length-1 axis
/// replicates its only element.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

pub fn pad<T: Scalar>(input: &FeatureMap<T>, padding: Padding) -> FeatureMap<T> {
    let n = padding.amount();
    if n == 0 {
        return input.clone();
    }
    let (c, h, w) = input.dims();
    let (ph, pw) = (h + 2 * n, w + 2 * n);
    let mut out = FeatureMap::zeros(c, ph, pw);
    let reflect = matches!(padding, Padding::Reflect(_));
    let col_src: Vec<usize> = (0..pw).map(|x| reflect_index(x as isize - n as isize, w)).collect();
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..ph {
            let sy = y as isize - n as isize;
            let row = &mut dst[y * pw..(y + 1) * pw];
            if reflect {
                let sy = reflect_index(sy, h);
                let src_row = &src[sy * w..(sy + 1) * w];
                for (d, &sx) in row.iter_mut().zip(&col_src) {
                    *d = src_row[sx];
                }
            } else if sy >= 0 && (sy as usize) < h {
                let sy = sy as usize;
                row[n..n + w].copy_from_slice(&src[sy * w..(sy + 1) * w]);
            }
        }
    }
    out
}

/// Geometry of a valid (already padded) strided convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: (usize, usize, usize), kh: usize, kw: usize, stride: usize) -> Option<Self> {
        let (channels, height, width) = input;
        if stride == 0 || kh == 0 || kw == 0 || kh > height || kw > width {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            out_h: (height - kh) / stride + 1,
            out_w: (width - kw) / stride + 1,
        })
    }

    #[inline]
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn rows_per_chunk(&self) -> usize {
        let cols = (CHUNK_ELEMS / self.patch_len().max(1)).max(self.out_w);
        (cols / self.out_w).max(1)
    }
}

/// Unrolls output rows `rows` into a `(patch_len x rows.len()*out_w)` matrix.
fn im2col<T: Scalar>(geo: &ConvGeometry, input: &[T], rows: Range<usize>) -> Vec<T> {
    let n = rows.len() * geo.out_w;
    let mut col = vec![T::zero(); geo.patch_len() * n];
    let plane = geo.height * geo.width;
    let mut row_idx = 0;
    for c in 0..geo.channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let dst = &mut col[row_idx * n..(row_idx + 1) * n];
                for (i, r) in rows.clone().enumerate() {
                    let sy = r * geo.stride + ky;
                    let line = &src[sy * geo.width..(sy + 1) * geo.width];
                    let out = &mut dst[i * geo.out_w..(i + 1) * geo.out_w];
                    if geo.stride == 1 {
                        out.copy_from_slice(&line[kx..kx + geo.out_w]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = line[ox * geo.stride + kx];
                        }
                    }
                }
                row_idx += 1;
            }
        }
    }
    col
}

/// Runs `filters (n_filters x patch_len) * im2col(input)` over fixed row
/// chunks and hands each `(rows, n_filters x rows.len()*out_w)` block to `f`.
/// Results are returned in row order.
pub(crate) fn conv_row_chunks<T, R, F>(geo: &ConvGeometry, input: &[T], filters: &[T], n_filters: usize, f: F) -> Vec<R>
where
    T: Scalar,
    R: Send,
    F: Fn(Range<usize>, &[T]) -> R + Sync,
{
    let k = geo.patch_len();
    debug_assert_eq!(filters.len(), n_filters * k);
    let step = geo.rows_per_chunk();
    let chunks: Vec<Range<usize>> = (0..geo.out_h).step_by(step).map(|r| r..(r + step).min(geo.out_h)).collect();
    chunks
        .into_par_iter()
        .map(|rows| {
            let n = rows.len() * geo.out_w;
            let col = im2col(geo, input, rows.clone());
            let mut out = vec![T::zero(); n_filters * n];
            T::gemm(n_filters, k, n, T::one(), filters, (k, 1), &col, (n, 1), T::zero(), &mut out, (n, 1));
            f(rows, &out)
        })
        .collect()
}

/// 2-D cross-correlation (the deep-learning "convolution").
pub fn conv2d<T: Scalar>(input: &FeatureMap<T>, kernel: &Kernel4D<T>, stride: usize, padding: Padding) -> Result<FeatureMap<T>> {
    if kernel.in_channels != input.channels {
        return Err(Error::shape(
            "conv2d",
            format!("input with {} channels for kernel {}", kernel.in_channels, kernel.shape_str()),
            input.shape_str(),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    let padded = pad(input, padding);
    let geo = ConvGeometry::new(padded.dims(), kernel.kh, kernel.kw, stride).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("padded input at least {}x{}", kernel.kh, kernel.kw),
            padded.shape_str(),
        )
    })?;
    let out_plane = geo.out_h * geo.out_w;
    let o = kernel.out_channels;
    let blocks = conv_row_chunks(&geo, padded.data(), &kernel.data, o, |rows, block| (rows, block.to_vec()));
    let mut out = FeatureMap::zeros(o, geo.out_h, geo.out_w);
    for (rows, block) in blocks {
        let n = rows.len() * geo.out_w;
        let base = rows.start * geo.out_w;
        for f in 0..o {
            out.data[f * out_plane + base..f * out_plane + base + n].copy_from_slice(&block[f * n..(f + 1) * n]);
        }
    }
    if let Some(bias) = &kernel.bias {
        for (f, &b) in bias.iter().enumerate() {
            out.channel_mut(f).iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

/// Transposed convolution: scatters stride-spaced copies of each filter,
/// scaled by the input activation. `input.channels` indexes the filters.
/// This is the linear adjoint of [`conv2d`] without padding, so the kernel
/// must not carry a bias.
pub fn conv_transpose2d<T: Scalar>(input: &FeatureMap<T>, kernel: &Kernel4D<T>, stride: usize) -> Result<FeatureMap<T>> {
    if kernel.out_channels != input.channels {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input with {} channels for kernel {}", kernel.out_channels, kernel.shape_str()),
            input.shape_str(),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv_transpose2d", "stride must be at least 1"));
    }
    if kernel.bias.is_some() {
        return Err(Error::invalid("conv_transpose2d", "the adjoint takes a bias-free kernel"));
    }
    let (cin, h, w) = input.dims();
    let (oc, kh, kw) = (kernel.in_channels, kernel.kh, kernel.kw);
    let (out_h, out_w) = ((h.max(1) - 1) * stride + kh, (w.max(1) - 1) * stride + kw);
    let mut out = FeatureMap::zeros(oc, out_h, out_w);
    if h == 0 || w == 0 {
        return Ok(out);
    }
    let k = kernel.filter_len();
    let rows_per_chunk = (CHUNK_ELEMS / k.max(1) / w).max(1);
    let out_plane = out_h * out_w;
    for r0 in (0..h).step_by(rows_per_chunk) {
        let r1 = (r0 + rows_per_chunk).min(h);
        let n = (r1 - r0) * w;
        // cols = kernel^T (k x cin) * input[:, r0..r1] (cin x n)
        let mut cols = vec![T::zero(); k * n];
        T::gemm(
            k,
            cin,
            n,
            T::one(),
            &kernel.data,
            (1, k),
            &input.data[r0 * w..],
            (h * w, 1),
            T::zero(),
            &mut cols,
            (n, 1),
        );
        for c in 0..oc {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &cols[((c * kh + ky) * kw + kx) * n..][..n];
                    for (i, y) in (r0..r1).enumerate() {
                        let oy = y * stride + ky;
                        let dst = &mut out.data[c * out_plane + oy * out_w..][..out_w];
                        let src = &row[i * w..(i + 1) * w];
                        for (x, &v) in src.iter().enumerate() {
                            dst[x * stride + kx] += v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Max pooling with floor semantics: trailing rows/columns that do not fill
/// a window are dropped.
pub fn max_pool2d<T: Scalar>(input: &FeatureMap<T>, size: usize, stride: usize) -> Result<FeatureMap<T>> {
    if size == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d", "window size and stride must be at least 1"));
    }
    let (c, h, w) = input.dims();
    if h < size || w < size {
        return Err(Error::shape("max_pool2d", format!("input at least {size}x{size}"), input.shape_str()));
    }
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let mut out = FeatureMap::zeros(c, oh, ow);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = T::neg_infinity();
                for ky in 0..size {
                    let line = &src[(oy * stride + ky) * w + ox * stride..][..size];
                    for &v in line {
                        m = m.max(v);
                    }
                }
                dst[oy * ow + ox] = m;
            }
        }
    }
    Ok(out)
}

/// Replicates every pixel into a `factor x factor` block.
pub fn upsample_nearest<T: Scalar>(input: &FeatureMap<T>, factor: usize) -> Result<FeatureMap<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (c, h, w) = input.dims();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = FeatureMap::zeros(c, oh, ow);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h {
            let line = &mut dst[y * factor * ow..(y * factor + 1) * ow];
            for x in 0..w {
                line[x * factor..(x + 1) * factor].fill(src[y * w + x]);
            }
            for r in 1..factor {
                dst.copy_within(y * factor * ow..(y * factor + 1) * ow, (y * factor + r) * ow);
            }
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(input: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut FeatureMap<T>) {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: T,
    pub std: T,
}

/// Mean and population standard deviation of each channel, accumulated in
/// `f64` with two passes.
pub fn channel_stats<T: Scalar>(input: &FeatureMap<T>) -> Vec<ChannelStats<T>> {
    (0..input.channels).map(|c| slice_stats(input.channel(c).iter().copied())).collect()
}

/// Two-pass mean/std of an arbitrary value sequence (empty → zeros).
pub(crate) fn slice_stats<T: Scalar, I: Iterator<Item = T> + Clone>(values: I) -> ChannelStats<T> {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for v in values.clone() {
        sum += v.to_f64_lossy();
        n += 1;
    }
    if n == 0 {
        return ChannelStats {
            mean: T::zero(),
            std: T::zero(),
        };
    }
    let mean = sum / n as f64;
    let var = values
        .map(|v| {
            let d = v.to_f64_lossy() - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    ChannelStats {
        mean: T::from_f64_lossy(mean),
        std: T::from_f64_lossy(var.sqrt()),
    }
}
