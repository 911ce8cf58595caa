//! Valid-padding 2D cross-correlation lowered to GEMM through im2col.
//!
//! The column buffer is built for a bounded number of output positions at a
//! time, spanning several images when they are small and a band of rows when
//! a single image is large (whole-image FCN inference).

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

/// Upper bound on im2col buffer entries per chunk.
const COLUMN_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height - self.kernel + 1
    }

    pub fn out_width(&self) -> usize {
        self.width - self.kernel + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_channels * self.out_plane()
    }

    /// Groups output rows into chunks whose column buffers fit the budget.
    fn chunks(&self) -> Vec<Vec<Segment>> {
        let wo = self.out_width();
        let max_cols = (COLUMN_BUDGET / self.patch_len()).max(wo);
        let mut chunks = Vec::new();
        let mut current: Vec<Segment> = Vec::new();
        let mut used = 0;
        for image in 0..self.batch {
            let mut row = 0;
            while row < self.out_height() {
                let room = (max_cols - used) / wo;
                if room == 0 {
                    chunks.push(std::mem::take(&mut current));
                    used = 0;
                    continue;
                }
                let end = (row + room).min(self.out_height());
                current.push(Segment {
                    image,
                    row_start: row,
                    row_end: end,
                });
                used += (end - row) * wo;
                row = end;
            }
        }
        if !current.is_empty() {
            chunks.push(current);
        }
        chunks
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    image: usize,
    row_start: usize,
    row_end: usize,
}

fn chunk_columns(geo: &ConvGeometry, chunk: &[Segment]) -> usize {
    chunk
        .iter()
        .map(|s| (s.row_end - s.row_start) * geo.out_width())
        .sum()
}

fn im2col<T: Element>(geo: &ConvGeometry, input: &[T], chunk: &[Segment], cols: &mut [T]) {
    let ncols = chunk_columns(geo, chunk);
    let (k, w, wo) = (geo.kernel, geo.width, geo.out_width());
    for ci in 0..geo.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                let mut col = 0;
                for seg in chunk {
                    let plane = &input[seg.image * geo.in_len() + ci * geo.height * w..];
                    for r in seg.row_start..seg.row_end {
                        let src = &plane[(r + ki) * w + kj..(r + ki) * w + kj + wo];
                        dst_row[col..col + wo].copy_from_slice(src);
                        col += wo;
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(geo: &ConvGeometry, cols: &[T], chunk: &[Segment], grad_input: &mut [T]) {
    let ncols = chunk_columns(geo, chunk);
    let (k, w, wo) = (geo.kernel, geo.width, geo.out_width());
    let in_len = geo.in_len();
    for ci in 0..geo.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                let mut col = 0;
                for seg in chunk {
                    let base = seg.image * in_len + ci * geo.height * w;
                    for r in seg.row_start..seg.row_end {
                        let start = base + (r + ki) * w + kj;
                        let dst = &mut grad_input[start..start + wo];
                        for (d, &s) in dst.iter_mut().zip(&src_row[col..col + wo]) {
                            *d += s;
                        }
                        col += wo;
                    }
                }
            }
        }
    }
}

/// Copies between the `[cout, ncols]` chunk layout and `[batch, cout, ho, wo]`.
fn for_each_segment_span(
    geo: &ConvGeometry,
    chunk: &[Segment],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    // f(out_channel, chunk_offset, tensor_offset, len)
    let ncols = chunk_columns(geo, chunk);
    let wo = geo.out_width();
    let plane = geo.out_plane();
    for co in 0..geo.out_channels {
        let mut col = 0;
        for seg in chunk {
            let len = (seg.row_end - seg.row_start) * wo;
            let dst = (seg.image * geo.out_channels + co) * plane + seg.row_start * wo;
            f(co, co * ncols + col, dst, len);
            col += len;
        }
    }
}

/// Forward pass over a whole batch. `input` is `[batch, cin, h, w]`,
/// `kernels` is `[cout, cin, k, k]`, `out` is `[batch, cout, ho, wo]`.
pub(crate) fn conv_forward_raw<T: Element>(
    geo: &ConvGeometry,
    input: &[T],
    kernels: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let kk = geo.patch_len();
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    for chunk in geo.chunks() {
        let ncols = chunk_columns(geo, &chunk);
        cols.resize(kk * ncols, T::zero());
        tmp.resize(geo.out_channels * ncols, T::zero());
        im2col(geo, input, &chunk, &mut cols);
        gemm(false, false, geo.out_channels, ncols, kk, kernels, &cols, T::zero(), &mut tmp);
        for_each_segment_span(geo, &chunk, |co, src, dst, len| {
            let b = bias[co];
            for (o, &v) in out[dst..dst + len].iter_mut().zip(&tmp[src..src + len]) {
                *o = v + b;
            }
        });
    }
}

/// Backward pass over a whole batch. Overwrites `grad_kernels` and
/// `grad_bias`; overwrites `grad_input` when requested.
pub(crate) fn conv_backward_raw<T: Element>(
    geo: &ConvGeometry,
    input: &[T],
    kernels: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    grad_kernels: &mut [T],
    grad_bias: &mut [T],
) {
    let kk = geo.patch_len();
    grad_kernels.iter_mut().for_each(|v| *v = T::zero());
    grad_bias.iter_mut().for_each(|v| *v = T::zero());
    if let Some(gi) = grad_input.as_deref_mut() {
        gi.iter_mut().for_each(|v| *v = T::zero());
    }
    let mut cols = Vec::new();
    let mut gout = Vec::new();
    for chunk in geo.chunks() {
        let ncols = chunk_columns(geo, &chunk);
        cols.resize(kk * ncols, T::zero());
        gout.resize(geo.out_channels * ncols, T::zero());
        for_each_segment_span(geo, &chunk, |co, dst, src, len| {
            let g = &grad_out[src..src + len];
            gout[dst..dst + len].copy_from_slice(g);
            grad_bias[co] += g.iter().copied().sum::<T>();
        });
        im2col(geo, input, &chunk, &mut cols);
        // dK[cout, kk] += dY[cout, ncols] * cols^T
        gemm(false, true, geo.out_channels, kk, ncols, &gout, &cols, T::one(), grad_kernels);
        if let Some(gi) = grad_input.as_deref_mut() {
            // dcols[kk, ncols] = K^T * dY
            gemm(true, false, kk, ncols, geo.out_channels, kernels, &gout, T::zero(), &mut cols);
            col2im_add(geo, &cols, &chunk, gi);
        }
    }
}

/// Inputs retained from a forward convolution for the backward pass.
#[derive(Debug, Clone)]
pub struct Conv2dCache<T = f32> {
    input: Tensor<T>,
    kernels: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T = f32> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

fn geometry<T: Element>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<ConvGeometry> {
    let (batch, c, h, w) = match *input.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::dim(format!(
                "convolution input must be [C,H,W] or [N,C,H,W], got {:?}",
                input.shape()
            )))
        }
    };
    let [cout, cin, kh, kw] = *kernels.shape() else {
        return Err(Error::dim(format!(
            "kernels must be [Cout,Cin,k,k], got {:?}",
            kernels.shape()
        )));
    };
    if kh != kw {
        return Err(Error::dim(format!("kernels must be square, got {kh}x{kw}")));
    }
    if cin != c {
        return Err(Error::dim(format!(
            "input has {c} channels but kernels expect {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    if h < kh || w < kw {
        return Err(Error::dim(format!(
            "input {h}x{w} is smaller than kernel {kh}x{kw}"
        )));
    }
    Ok(ConvGeometry {
        batch,
        in_channels: c,
        height: h,
        width: w,
        out_channels: cout,
        kernel: kh,
    })
}

fn output_shape(input: &Tensor<impl Element>, geo: &ConvGeometry) -> Vec<usize> {
    let spatial = [geo.out_channels, geo.out_height(), geo.out_width()];
    if input.rank() == 3 {
        spatial.to_vec()
    } else {
        std::iter::once(geo.batch).chain(spatial).collect()
    }
}

/// Cross-correlation with valid padding plus a per-channel bias.
///
/// Accepts a single `[C,H,W]` image or a `[N,C,H,W]` batch; the output has
/// the same rank with spatial size `(H-k+1) x (W-k+1)`.
pub fn conv2d_valid<T: Element>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let geo = geometry(input, kernels, bias)?;
    let mut out = vec![T::zero(); geo.out_len()];
    conv_forward_raw(&geo, input.data(), kernels.data(), bias.data(), &mut out);
    Tensor::from_vec(&output_shape(input, &geo), out)
}

pub fn conv2d_valid_cached<T: Element>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Conv2dCache<T>)> {
    let out = conv2d_valid(input, kernels, bias)?;
    let cache = Conv2dCache {
        input: input.clone(),
        kernels: kernels.clone(),
    };
    Ok((out, cache))
}

pub fn conv2d_backward<T: Element>(cache: &Conv2dCache<T>, grad_out: &Tensor<T>) -> Result<Conv2dGrads<T>> {
    let cout = cache.kernels.shape()[0];
    let bias = Tensor::zeros(&[cout]);
    let geo = geometry(&cache.input, &cache.kernels, &bias)?;
    let expected = output_shape(&cache.input, &geo);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::dim(format!(
            "gradient shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let mut gi = vec![T::zero(); cache.input.len()];
    let mut gk = vec![T::zero(); cache.kernels.len()];
    let mut gb = vec![T::zero(); cout];
    conv_backward_raw(
        &geo,
        cache.input.data(),
        cache.kernels.data(),
        grad_out.data(),
        Some(&mut gi),
        &mut gk,
        &mut gb,
    );
    Ok(Conv2dGrads {
        input: Tensor::from_vec(cache.input.shape(), gi)?,
        kernels: Tensor::from_vec(cache.kernels.shape(), gk)?,
        bias: Tensor::from_vec(&[cout], gb)?,
    })
}
