//! Convolution, pooling and matmul kernels.
//!
//! All kernels parallelise over the batch axis only, with each worker
//! writing a disjoint output slice, and any cross-sample reduction uses a
//! fixed chunking that depends on the batch size alone. Results are
//! therefore bit-identical across runs regardless of thread scheduling.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix4, Zip};
use rayon::prelude::*;

use super::Scalar;

/// Shape bookkeeping for one convolution: enough to reconstruct the
/// forward map and both of its adjoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    /// Input spatial dims (H, W).
    pub in_hw: (usize, usize),
    /// Kernel spatial dims (KH, KW).
    pub k_hw: (usize, usize),
}

impl ConvGeom {
    pub fn infer(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x_shape.len(), 4, "conv input must be (B,C,H,W)");
        assert_eq!(w_shape.len(), 4, "conv weight must be (O,C,KH,KW)");
        assert_eq!(x_shape[1], w_shape[1], "conv channel mismatch");
        let geom = ConvGeom {
            stride,
            pad,
            in_hw: (x_shape[2], x_shape[3]),
            k_hw: (w_shape[2], w_shape[3]),
        };
        let (oh, ow) = geom.out_hw();
        assert!(oh > 0 && ow > 0, "conv output collapses to zero size");
        geom
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let (h, w) = self.in_hw;
        let (kh, kw) = self.k_hw;
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }
}

/// Matrix product with deterministic row-chunk parallelism. The chunk
/// size is a pure function of the row count, so the split (and the
/// result) never depends on thread scheduling.
pub fn par_matmul<F: Scalar>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Array2<F> {
    let (m, _k) = a.dim();
    let n = b.dim().1;
    let chunk = m.div_ceil(8).max(128);
    if m <= chunk {
        return a.dot(b);
    }
    let mut out = Array2::zeros((m, n));
    let blocks: Vec<_> = out.axis_chunks_iter_mut(Axis(0), chunk).collect();
    let a_blocks: Vec<_> = a.axis_chunks_iter(Axis(0), chunk).collect();
    rayon::scope(|sc| {
        for (mut ob, ab) in blocks.into_iter().zip(a_blocks) {
            sc.spawn(move |_| {
                ob.assign(&ab.dot(b));
            });
        }
    });
    out
}

// ---------------------------------------------------------------------
// Direct kernels for stride-1 convolutions.
//
// At stride 1 the patch matrix of im2col is kh*kw times the input and
// dominates memory traffic; shifted-row accumulation touches each
// element a small constant number of times instead.
// ---------------------------------------------------------------------

/// y[b,co,i,j] = sum_{ci,ky,kx} w[co,ci,ky,kx] * x[b,ci,i+ky-p,j+kx-p]
fn conv2d_direct_s1<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w: &ArrayView4<'_, F>,
    pad: usize,
    out: (usize, usize),
) -> Array4<F> {
    let (b, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (oh, ow) = out;
    let mut y = Array4::<F>::zeros((b, cout, oh, ow));
    let y_blocks: Vec<_> = y.axis_iter_mut(Axis(0)).collect();
    let x_blocks: Vec<_> = x.axis_iter(Axis(0)).collect();
    rayon::scope(|sc| {
        for (mut ys, xs) in y_blocks.into_iter().zip(x_blocks) {
            sc.spawn(move |_| {
                let xsl = xs.to_slice().expect("contiguous sample");
                let ysl = ys.as_slice_mut().expect("contiguous sample");
                for co in 0..cout {
                    let ybase = co * oh * ow;
                    for ci in 0..cin {
                        let xbase = ci * h * wd;
                        for ky in 0..kh {
                            for i in 0..oh {
                                let iy = i as isize + ky as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xsl[xbase + iy as usize * wd..][..wd];
                                let yrow = &mut ysl[ybase + i * ow..][..ow];
                                for kx in 0..kw {
                                    let coeff = w[[co, ci, ky, kx]];
                                    if coeff == F::zero() {
                                        continue;
                                    }
                                    // j + kx - p must land inside [0, wd)
                                    let j0 = pad.saturating_sub(kx);
                                    let j1 = ow.min(wd + pad - kx);
                                    if j0 >= j1 {
                                        continue;
                                    }
                                    let xoff = j0 + kx - pad;
                                    let (ys2, xs2) =
                                        (&mut yrow[j0..j1], &xrow[xoff..xoff + (j1 - j0)]);
                                    for (yv, &xv) in ys2.iter_mut().zip(xs2) {
                                        *yv = *yv + coeff * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
    });
    y
}

/// dw[co,ci,ky,kx] = sum_{b,i,j} dy[b,co,i,j] * x[b,ci,i+ky-p,j+kx-p],
/// accumulated over a fixed 4-way batch chunking.
fn conv2d_weight_grad_s1<F: Scalar>(
    x: &ArrayView4<'_, F>,
    dy: &ArrayView4<'_, F>,
    pad: usize,
    k_hw: (usize, usize),
) -> Array4<F> {
    let (b, cin, h, wd) = x.dim();
    let (_, cout, oh, ow) = dy.dim();
    let (kh, kw) = k_hw;
    let chunk = b.div_ceil(4).max(1);
    let pairs: Vec<_> = x
        .axis_chunks_iter(Axis(0), chunk)
        .zip(dy.axis_chunks_iter(Axis(0), chunk))
        .collect();
    let partials: Vec<Array4<F>> = pairs
        .into_par_iter()
        .map(|(xc, dyc)| {
            let mut dw = Array4::<F>::zeros((cout, cin, kh, kw));
            for (xs, dys) in xc.axis_iter(Axis(0)).zip(dyc.axis_iter(Axis(0))) {
                let xsl = xs.to_slice().expect("contiguous sample");
                let dsl = dys.to_slice().expect("contiguous sample");
                for i in 0..oh {
                    for ci in 0..cin {
                        let xbase = ci * h * wd;
                        for ky in 0..kh {
                            let iy = i as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xsl[xbase + iy as usize * wd..][..wd];
                            for co in 0..cout {
                                let dyrow = &dsl[co * oh * ow + i * ow..][..ow];
                                for kx in 0..kw {
                                    let j0 = pad.saturating_sub(kx);
                                    let j1 = ow.min(wd + pad - kx);
                                    if j0 >= j1 {
                                        continue;
                                    }
                                    let xoff = j0 + kx - pad;
                                    let mut acc = F::zero();
                                    for (dv, xv) in dyrow[j0..j1]
                                        .iter()
                                        .zip(&xrow[xoff..xoff + (j1 - j0)])
                                    {
                                        acc = acc + *dv * *xv;
                                    }
                                    dw[[co, ci, ky, kx]] = dw[[co, ci, ky, kx]] + acc;
                                }
                            }
                        }
                    }
                }
            }
            dw
        })
        .collect();
    let mut dw = Array4::<F>::zeros((cout, cin, kh, kw));
    for p in partials {
        dw = dw + p;
    }
    dw
}

/// Transposed-and-flipped weights: the stride-1 input gradient is a
/// stride-1 convolution of dy with these.
fn flip_transpose_weights<F: Scalar>(w: &ArrayView4<'_, F>) -> Array4<F> {
    let (cout, cin, kh, kw) = w.dim();
    let mut wt = Array4::<F>::zeros((cin, cout, kh, kw));
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    wt[[ci, co, kh - 1 - ky, kw - 1 - kx]] = w[[co, ci, ky, kx]];
                }
            }
        }
    }
    wt
}

fn as4<F: Scalar>(v: &ArrayD<F>) -> ArrayView4<'_, F> {
    v.view().into_dimensionality::<Ix4>().expect("expected rank-4 array")
}

/// Gather the (C*KH*KW) patch columns of one sample into `col`,
/// laid out as (OH*OW, C*KH*KW).
fn im2col_into<F: Scalar>(
    x: &ndarray::ArrayView3<'_, F>,
    geom: &ConvGeom,
    col: &mut ndarray::ArrayViewMut2<'_, F>,
) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = geom.k_hw;
    let (oh, ow) = geom.out_hw();
    let (stride, pad) = (geom.stride, geom.pad);
    debug_assert_eq!(col.shape(), &[oh * ow, c_in * kh * kw]);
    let xs = x.as_slice().expect("sample must be contiguous");
    for r in 0..oh * ow {
        let oy = r / ow;
        let ox = r % ow;
        let iy0 = (oy * stride) as isize - pad as isize;
        let ix0 = (ox * stride) as isize - pad as isize;
        let row = col.row_mut(r);
        let row = row.into_slice().unwrap();
        for ci in 0..c_in {
            let xoff = ci * h * w;
            let coff = ci * kh * kw;
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                let dst = &mut row[coff + ky * kw..coff + ky * kw + kw];
                if iy < 0 || iy >= h as isize {
                    dst.fill(F::zero());
                    continue;
                }
                let base = xoff + iy as usize * w;
                for (kx, d) in dst.iter_mut().enumerate() {
                    let ix = ix0 + kx as isize;
                    *d = if ix < 0 || ix >= w as isize {
                        F::zero()
                    } else {
                        xs[base + ix as usize]
                    };
                }
            }
        }
    }
}

/// Scatter-add columns back into one sample (adjoint of `im2col`).
fn col2im<F: Scalar>(col: &ArrayView2<'_, F>, geom: &ConvGeom, x: &mut ndarray::ArrayViewMut3<'_, F>) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = geom.k_hw;
    let (oh, ow) = geom.out_hw();
    let (stride, pad) = (geom.stride, geom.pad);
    let xs = x.as_slice_mut().expect("sample must be contiguous");
    xs.fill(F::zero());
    for r in 0..oh * ow {
        let oy = r / ow;
        let ox = r % ow;
        let iy0 = (oy * stride) as isize - pad as isize;
        let ix0 = (ox * stride) as isize - pad as isize;
        let row = col.row(r);
        let row = row.as_slice().unwrap();
        for ci in 0..c_in {
            let xoff = ci * h * w;
            let coff = ci * kh * kw;
            for ky in 0..kh {
                let iy = iy0 + ky as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let base = xoff + iy as usize * w;
                let src = &row[coff + ky * kw..coff + ky * kw + kw];
                for (kx, &v) in src.iter().enumerate() {
                    let ix = ix0 + kx as isize;
                    if ix >= 0 && ix < w as isize {
                        xs[base + ix as usize] = xs[base + ix as usize] + v;
                    }
                }
            }
        }
    }
}

/// Gathers patches for the whole batch into one (B*OH*OW, C*KH*KW)
/// matrix; rows for sample b occupy the contiguous block starting at
/// b*OH*OW.
fn im2col_batch<F: Scalar>(x: &ArrayView4<'_, F>, geom: &ConvGeom) -> Array2<F> {
    let (b, c, _h, _w) = x.dim();
    let (kh, kw) = geom.k_hw;
    let (oh, ow) = geom.out_hw();
    let ckk = c * kh * kw;
    let rows_per = oh * ow;
    let mut col = Array2::<F>::zeros((b * rows_per, ckk));
    let blocks: Vec<_> = col.axis_chunks_iter_mut(Axis(0), rows_per).collect();
    let samples: Vec<_> = x.axis_iter(Axis(0)).collect();
    rayon::scope(|sc| {
        for (mut block, xs) in blocks.into_iter().zip(samples) {
            let geom = geom.clone();
            sc.spawn(move |_| {
                im2col_into(&xs, &geom, &mut block);
            });
        }
    });
    col
}

/// y[b,o] = sum_{c,kh,kw} x[b,c,..] * w[o,c,kh,kw]
pub fn conv2d<F: Scalar>(x: &ArrayD<F>, w: &ArrayD<F>, geom: &ConvGeom) -> ArrayD<F> {
    let x = as4(x);
    let w = as4(w);
    if geom.stride == 1 {
        return conv2d_direct_s1(&x, &w, geom.pad, geom.out_hw()).into_dyn();
    }
    let (b, _c, _h, _w) = x.dim();
    let o = w.dim().0;
    let (kh, kw) = geom.k_hw;
    let ckk = w.dim().1 * kh * kw;
    let (oh, ow) = geom.out_hw();
    let rows_per = oh * ow;
    let col = im2col_batch(&x, geom);
    let wmat = w.to_shape((o, ckk)).expect("weight reshape");
    let wt = wmat.t().as_standard_layout().to_owned();
    // (B*OH*OW, O), then per-sample transpose into (B, O, OH, OW).
    let yt = par_matmul(&col.view(), &wt.view());
    let mut y = Array4::<F>::zeros((b, o, oh, ow));
    let y_blocks: Vec<_> = y.axis_iter_mut(Axis(0)).collect();
    let yt_blocks: Vec<_> = yt.axis_chunks_iter(Axis(0), rows_per).collect();
    rayon::scope(|sc| {
        for (mut ys, yts) in y_blocks.into_iter().zip(yt_blocks) {
            sc.spawn(move |_| {
                let yst = yts.t().as_standard_layout().into_owned();
                ys.assign(&yst.into_shape_with_order((o, oh, ow)).unwrap());
            });
        }
    });
    y.into_dyn()
}

/// dx[b] = col2im(dy[b]^T . wmat): adjoint of `conv2d` in its input.
pub fn conv2d_input_grad<F: Scalar>(dy: &ArrayD<F>, w: &ArrayD<F>, geom: &ConvGeom) -> ArrayD<F> {
    let dy = as4(dy);
    let w = as4(w);
    if geom.stride == 1 {
        let wt = flip_transpose_weights(&w);
        let (kh, kw) = geom.k_hw;
        // Full correlation: output is the input size, pad' = k - 1 - p.
        let pad_h = kh - 1 - geom.pad;
        debug_assert_eq!(kw - 1 - geom.pad, pad_h, "square kernels assumed");
        return conv2d_direct_s1(&dy, &wt.view(), pad_h, geom.in_hw).into_dyn();
    }
    let (b, o, oh, ow) = dy.dim();
    let c = w.dim().1;
    let (kh, kw) = geom.k_hw;
    let (h, wd) = geom.in_hw;
    let ckk = c * kh * kw;
    let rows_per = oh * ow;
    let wmat = w.to_shape((o, ckk)).expect("weight reshape");

    // (B*OH*OW, O) view of dy via per-sample transposes.
    let mut dyt = Array2::<F>::zeros((b * rows_per, o));
    {
        let blocks: Vec<_> = dyt.axis_chunks_iter_mut(Axis(0), rows_per).collect();
        let samples: Vec<_> = dy.axis_iter(Axis(0)).collect();
        rayon::scope(|sc| {
            for (mut block, dys) in blocks.into_iter().zip(samples) {
                sc.spawn(move |_| {
                    let dymat = dys.to_shape((o, rows_per)).unwrap();
                    block.assign(&dymat.t());
                });
            }
        });
    }
    let dcol = par_matmul(&dyt.view(), &wmat.view());
    let mut dx = Array4::<F>::zeros((b, c, h, wd));
    let dx_blocks: Vec<_> = dx.axis_iter_mut(Axis(0)).collect();
    let dcol_blocks: Vec<_> = dcol.axis_chunks_iter(Axis(0), rows_per).collect();
    rayon::scope(|sc| {
        for (mut dxs, dcols) in dx_blocks.into_iter().zip(dcol_blocks) {
            let geom = geom.clone();
            sc.spawn(move |_| {
                col2im(&dcols, &geom, &mut dxs);
            });
        }
    });
    dx.into_dyn()
}

/// dw[o,c,kh,kw] = sum_b dy[b,o] outer patches(x[b]).
///
/// The sum over the batch uses a fixed 4-way chunking so the reduction
/// order is independent of thread count.
pub fn conv2d_weight_grad<F: Scalar>(x: &ArrayD<F>, dy: &ArrayD<F>, geom: &ConvGeom) -> ArrayD<F> {
    let x = as4(x);
    let dy = as4(dy);
    if geom.stride == 1 {
        return conv2d_weight_grad_s1(&x, &dy, geom.pad, geom.k_hw).into_dyn();
    }
    let (b, c, _h, _w) = x.dim();
    let (_, o, oh, ow) = dy.dim();
    let (kh, kw) = geom.k_hw;
    let ckk = c * kh * kw;
    let chunk = b.div_ceil(4).max(1);
    let rows_per = oh * ow;
    let pairs: Vec<_> = x
        .axis_chunks_iter(Axis(0), chunk)
        .zip(dy.axis_chunks_iter(Axis(0), chunk))
        .collect();
    let partials: Vec<Array2<F>> = pairs
        .into_par_iter()
        .map(|(xc, dyc)| {
            let nb = xc.shape()[0];
            let col = im2col_batch(&xc, geom);
            // (O, nb*OH*OW) from the chunk's dy.
            let mut dymat = Array2::<F>::zeros((o, nb * rows_per));
            for (bi, dys) in dyc.axis_iter(Axis(0)).enumerate() {
                dymat
                    .slice_mut(ndarray::s![.., bi * rows_per..(bi + 1) * rows_per])
                    .assign(&dys.to_shape((o, rows_per)).unwrap());
            }
            dymat.dot(&col)
        })
        .collect();
    let mut dw = Array2::<F>::zeros((o, ckk));
    for p in partials {
        dw = dw + p;
    }
    dw.into_shape_with_order((o, c, kh, kw)).unwrap().into_dyn()
}

pub fn upsample_nearest2<F: Scalar>(x: &ArrayD<F>) -> ArrayD<F> {
    let x = as4(x);
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((b, c, 2 * h, 2 * w));
    Zip::from(y.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|mut ys, xs| {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xs[[ci, i, j]];
                        ys[[ci, 2 * i, 2 * j]] = v;
                        ys[[ci, 2 * i, 2 * j + 1]] = v;
                        ys[[ci, 2 * i + 1, 2 * j]] = v;
                        ys[[ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        });
    y.into_dyn()
}

pub fn pool_sum2<F: Scalar>(x: &ArrayD<F>) -> ArrayD<F> {
    let x = as4(x);
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pool_sum2 needs even dims");
    let mut y = Array4::<F>::zeros((b, c, h / 2, w / 2));
    Zip::from(y.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|mut ys, xs| {
            for ci in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        ys[[ci, i, j]] = xs[[ci, 2 * i, 2 * j]]
                            + xs[[ci, 2 * i, 2 * j + 1]]
                            + xs[[ci, 2 * i + 1, 2 * j]]
                            + xs[[ci, 2 * i + 1, 2 * j + 1]];
                    }
                }
            }
        });
    y.into_dyn()
}

/// 2x2/stride-2 max pooling. Returns the pooled map and, per output
/// element, the flat offset of the winning input within its sample.
pub fn max_pool2<F: Scalar>(x: &ArrayD<F>) -> (ArrayD<F>, Vec<u32>) {
    let x = as4(x);
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<F>::zeros((b, c, oh, ow));
    let mut idx = vec![0u32; b * c * oh * ow];
    let idx_chunks: Vec<&mut [u32]> = idx.chunks_mut(c * oh * ow).collect();
    let y_iter: Vec<_> = y.axis_iter_mut(Axis(0)).collect();
    let x_iter: Vec<_> = x.axis_iter(Axis(0)).collect();
    rayon::scope(|sc| {
        for ((mut ys, xs), ichunk) in y_iter.into_iter().zip(x_iter).zip(idx_chunks) {
            sc.spawn(move |_| {
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let cands = [
                                (2 * i, 2 * j),
                                (2 * i, 2 * j + 1),
                                (2 * i + 1, 2 * j),
                                (2 * i + 1, 2 * j + 1),
                            ];
                            let mut best = cands[0];
                            let mut bv = xs[[ci, best.0, best.1]];
                            for &(pi, pj) in &cands[1..] {
                                let v = xs[[ci, pi, pj]];
                                if v > bv {
                                    bv = v;
                                    best = (pi, pj);
                                }
                            }
                            ys[[ci, i, j]] = bv;
                            ichunk[ci * oh * ow + i * ow + j] =
                                (ci * h * w + best.0 * w + best.1) as u32;
                        }
                    }
                }
            });
        }
    });
    (y.into_dyn(), idx)
}

pub fn max_unpool2<F: Scalar>(dy: &ArrayD<F>, idx: &[u32], src_shape: &[usize]) -> ArrayD<F> {
    let dy = as4(dy);
    let (_b, c, oh, ow) = dy.dim();
    let per = c * oh * ow;
    let sample_len = src_shape[1] * src_shape[2] * src_shape[3];
    let mut out = Array4::<F>::zeros((src_shape[0], src_shape[1], src_shape[2], src_shape[3]));
    {
        let os = out.as_slice_mut().unwrap();
        let chunks: Vec<&mut [F]> = os.chunks_mut(sample_len).collect();
        let dy_iter: Vec<_> = dy.axis_iter(Axis(0)).collect();
        rayon::scope(|sc| {
            for ((bi, chunk), dys) in chunks.into_iter().enumerate().zip(dy_iter) {
                let idx = &idx[bi * per..(bi + 1) * per];
                sc.spawn(move |_| {
                    let dslice = dys.to_slice().unwrap();
                    for (r, &target) in idx.iter().enumerate() {
                        chunk[target as usize] = chunk[target as usize] + dslice[r];
                    }
                });
            }
        });
    }
    out.into_dyn()
}

pub fn gather_pool2<F: Scalar>(x: &ArrayD<F>, idx: &[u32], out_shape: &[usize]) -> ArrayD<F> {
    let x = as4(x);
    let (b, c, h, w) = x.dim();
    let per = out_shape[1] * out_shape[2] * out_shape[3];
    let sample_len = c * h * w;
    let mut out = vec![F::zero(); b * per];
    {
        let chunks: Vec<&mut [F]> = out.chunks_mut(per).collect();
        let x_iter: Vec<_> = x.axis_iter(Axis(0)).collect();
        rayon::scope(|sc| {
            for ((bi, chunk), xs) in chunks.into_iter().enumerate().zip(x_iter) {
                let idx = &idx[bi * per..(bi + 1) * per];
                sc.spawn(move |_| {
                    let xslice = xs.to_slice().unwrap();
                    debug_assert_eq!(xslice.len(), sample_len);
                    for (r, &src) in idx.iter().enumerate() {
                        chunk[r] = xslice[src as usize];
                    }
                });
            }
        });
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(out_shape), out).unwrap()
}

#[allow(unused_imports)]
use rayon::prelude::*;
