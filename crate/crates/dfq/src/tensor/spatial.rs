//! Convolution, pooling and upsampling.
//!
//! Convolution lowers each sample to an im2row matrix (rows = output
//! positions, cols = input taps) and runs one gemm per sample; the batch
//! loop is data-parallel with one task per sample, so thread count never
//! changes reduction order.

use super::gemm::gemm;
use super::{dims4, GradStore, Op, Tensor};
use crate::error::{Error, Result};
use crate::parallel::for_chunks_mut;

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    let (n, c, h, w) = dims4(x, "conv2d")?;
    let (o, wc, kh, kw) = dims4(weight, "conv2d")?;
    if wc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims { n, c, h, w, o, kh, kw, oh, ow })
}

/// Lower one sample (C×H×W) to the tap matrix col[(c·kh·kw), (oh·ow)].
/// Every element is written, so dirty scratch buffers are fine.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let plane = oh * ow;
    debug_assert_eq!(out.len(), c * kh * kw * plane);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut out[((ci * kh + ky) * kw + kx) * plane..((ci * kh + ky) * kw + kx + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    if stride == 1 {
                        // contiguous run with zeroed edges
                        let ix0 = kx as isize - pad as isize;
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ix0 + ox as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter a tap-matrix gradient back into a (C×H×W) buffer.
#[allow(clippy::too_many_arguments)]
fn col2im_accum(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * plane..((ci * kh + ky) * kw + kx + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut out[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-thread grow-only scratch for tap matrices.
fn with_col_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    use std::cell::RefCell;
    thread_local! {
        static SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
    }
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// 2-D convolution, NCHW input, OIHW weight, optional per-channel bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let d = conv_dims(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [d.o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let ckk = d.c * d.kh * d.kw;
    let out_plane = d.oh * d.ow;
    let mut out = vec![0.0f32; d.n * d.o * out_plane];
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.map(|b| b.data());
    for_chunks_mut(&mut out, d.o * out_plane, |i, chunk| {
        with_col_scratch(ckk * out_plane, |col| {
            im2col(
                &xd[i * d.c * d.h * d.w..(i + 1) * d.c * d.h * d.w],
                d.c,
                d.h,
                d.w,
                d.kh,
                d.kw,
                stride,
                pad,
                d.oh,
                d.ow,
                col,
            );
            gemm(d.o, ckk, out_plane, 1.0, wd, ckk, false, col, out_plane, false, 0.0, chunk, out_plane);
        });
        if let Some(bd) = bd {
            for (o, &bv) in bd.iter().enumerate() {
                for v in &mut chunk[o * out_plane..(o + 1) * out_plane] {
                    *v += bv;
                }
            }
        }
    });
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(out, vec![d.n, d.o, d.oh, d.ow], Op::Conv2d { stride, pad }, inputs))
}

pub(crate) fn conv2d_backward(
    out: &Tensor,
    ins: &[Tensor],
    g: &[f32],
    stride: usize,
    pad: usize,
    sink: &mut GradStore,
) -> Result<()> {
    let x = &ins[0];
    let weight = &ins[1];
    let d = conv_dims(x, weight, stride, pad)?;
    debug_assert_eq!(out.shape(), [d.n, d.o, d.oh, d.ow]);
    let ckk = d.c * d.kh * d.kw;
    let out_plane = d.oh * d.ow;
    let sample = d.c * d.h * d.w;
    let xd = x.data();
    let wd = weight.data();

    if x.requires_grad() {
        sink.add_with(x, |buf| {
            for_chunks_mut(buf, sample, |i, dx| {
                let g_n = &g[i * d.o * out_plane..(i + 1) * d.o * out_plane];
                with_col_scratch(ckk * out_plane, |dcol| {
                    gemm(ckk, d.o, out_plane, 1.0, wd, ckk, true, g_n, out_plane, false, 0.0, dcol, out_plane);
                    col2im_accum(dcol, d.c, d.h, d.w, d.kh, d.kw, stride, pad, d.oh, d.ow, dx);
                });
            });
        });
    }

    if weight.requires_grad() {
        // all samples' tap matrices once, then row-chunked accumulation
        let mut cols = vec![0.0f32; d.n * out_plane * ckk];
        for_chunks_mut(&mut cols, out_plane * ckk, |i, col| {
            im2col(&xd[i * sample..(i + 1) * sample], d.c, d.h, d.w, d.kh, d.kw, stride, pad, d.oh, d.ow, col);
        });
        sink.add_with(weight, |buf| {
            let rows_per_chunk = 16usize;
            for_chunks_mut(buf, rows_per_chunk * ckk, |chunk_i, dw| {
                let r0 = chunk_i * rows_per_chunk;
                let rows = dw.len() / ckk;
                for i in 0..d.n {
                    let g_rows = &g[i * d.o * out_plane + r0 * out_plane..];
                    let col = &cols[i * out_plane * ckk..(i + 1) * out_plane * ckk];
                    gemm(rows, out_plane, ckk, 1.0, g_rows, out_plane, false, col, out_plane, true, 1.0, dw, ckk);
                }
            });
        });
    }

    if ins.len() == 3 && ins[2].requires_grad() {
        let mut db = vec![0.0f32; d.o];
        for (o, out_g) in db.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..d.n {
                for &gv in &g[(i * d.o + o) * out_plane..(i * d.o + o + 1) * out_plane] {
                    acc += gv as f64;
                }
            }
            *out_g = acc as f32;
        }
        sink.add(&ins[2], db);
    }
    Ok(())
}

impl Tensor {
    /// Max pooling with square kernel `k` and stride `s`, no padding.
    pub fn max_pool2d(&self, k: usize, s: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "max_pool2d")?;
        if k == 0 || s == 0 || h < k || w < k {
            return Err(Error::invalid("max_pool2d", format!("kernel {k} stride {s} on {h}x{w}")));
        }
        let oh = (h - k) / s + 1;
        let ow = (w - k) / s + 1;
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for ky in 0..k {
                            for kx in 0..k {
                                let idx = base + (oy * s + ky) * w + ox * s + kx;
                                let v = self.data()[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        data.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        Ok(Tensor::from_op(data, vec![n, c, oh, ow], Op::MaxPool2d { argmax }, vec![self.clone()]))
    }

    /// Adaptive max pooling to (oh, ow); input extents must divide evenly.
    pub fn adaptive_max_pool(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "adaptive_max_pool")?;
        if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
            return Err(Error::invalid(
                "adaptive_max_pool",
                format!("input {h}x{w} not divisible into {oh}x{ow} blocks"),
            ));
        }
        let (bh, bw) = (h / oh, w / ow);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for ky in 0..bh {
                            for kx in 0..bw {
                                let idx = base + (oy * bh + ky) * w + ox * bw + kx;
                                let v = self.data()[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        data.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        Ok(Tensor::from_op(data, vec![n, c, oh, ow], Op::AdaptiveMaxPool { argmax }, vec![self.clone()]))
    }

    /// Adaptive average pooling to (oh, ow); input extents must divide evenly.
    pub fn adaptive_avg_pool(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "adaptive_avg_pool")?;
        if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
            return Err(Error::invalid(
                "adaptive_avg_pool",
                format!("input {h}x{w} not divisible into {oh}x{ow} blocks"),
            ));
        }
        let (bh, bw) = (h / oh, w / ow);
        let block = (bh * bw) as f64;
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ky in 0..bh {
                            for kx in 0..bw {
                                acc += self.data()[base + (oy * bh + ky) * w + ox * bw + kx] as f64;
                            }
                        }
                        data.push((acc / block) as f32);
                    }
                }
            }
        }
        Ok(Tensor::from_op(data, vec![n, c, oh, ow], Op::AdaptiveAvgPool { oh, ow }, vec![self.clone()]))
    }

    /// Global average pooling of NCHW → [n, c].
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (n, c, _, _) = dims4(self, "global_avg_pool")?;
        self.adaptive_avg_pool(1, 1)?.reshape(&[n, c])
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be positive"));
        }
        let (nh, nw) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(n * c * nh * nw);
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * h * w;
                for oy in 0..nh {
                    let iy = oy / factor;
                    for ox in 0..nw {
                        data.push(self.data()[base + iy * w + ox / factor]);
                    }
                }
            }
        }
        Ok(Tensor::from_op(data, vec![n, c, nh, nw], Op::UpsampleNearest { factor }, vec![self.clone()]))
    }
}

pub(crate) fn adaptive_avg_pool_backward(x: &Tensor, g: &[f32], oh: usize, ow: usize, sink: &mut GradStore) -> Result<()> {
    let (n, c, h, w) = dims4(x, "adaptive_avg_pool")?;
    let (bh, bw) = (h / oh, w / ow);
    let scale = 1.0 / (bh * bw) as f32;
    sink.add_with(x, |buf| {
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * h * w;
                let gbase = (i * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[gbase + oy * ow + ox] * scale;
                        for ky in 0..bh {
                            for kx in 0..bw {
                                buf[base + (oy * bh + ky) * w + ox * bw + kx] += gv;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(())
}

pub(crate) fn upsample_backward(x: &Tensor, g: &[f32], factor: usize, sink: &mut GradStore) -> Result<()> {
    let (n, c, h, w) = dims4(x, "upsample_nearest")?;
    let (nh, nw) = (h * factor, w * factor);
    sink.add_with(x, |buf| {
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * h * w;
                let gbase = (i * c + ci) * nh * nw;
                for iy in 0..h {
                    for ix in 0..w {
                        let mut acc = 0.0f64;
                        for ky in 0..factor {
                            for kx in 0..factor {
                                acc += g[gbase + (iy * factor + ky) * nw + ix * factor + kx] as f64;
                            }
                        }
                        buf[base + iy * w + ix] += acc as f32;
                    }
                }
            }
        }
    });
    Ok(())
}
