//! im2col-based 2-D convolution and transposed convolution.
//!
//! Each batch sample is lowered to a single matrix product; samples are
//! processed in parallel with an order-preserving collect, and weight
//! gradients are reduced sequentially in sample order, so results are
//! bitwise reproducible regardless of thread count.

use super::Tensor;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Ix4};
use rayon::prelude::*;

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn pad2d(x: &ArrayView3<f64>, pad: usize) -> Array3<f64> {
    if pad == 0 {
        return x.to_owned();
    }
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(ndarray::s![.., pad..pad + h, pad..pad + w])
        .assign(x);
    out
}

/// Lowers sliding windows of `xp` (already padded) to rows of a matrix.
/// Row `oy*ow + ox` holds the window at origin `(oy*stride, ox*stride)`,
/// columns ordered as `(c, ky, kx)`.
fn im2col(
    xp: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let c = xp.dim().0;
    let mut cols = Array2::zeros((oh * ow, c * kh * kw));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut out_row = cols.row_mut(row);
            let mut k = 0;
            for ch in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        out_row[k] = xp[(ch, oy * stride + ky, ox * stride + kx)];
                        k += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Inverse of [`im2col`]: scatter-adds matrix rows back onto the padded
/// image grid.
fn col2im(
    cols: &ArrayView2<f64>,
    c: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut out = Array3::zeros((c, height, width));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row(oy * ow + ox);
            let mut k = 0;
            for ch in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        out[(ch, oy * stride + ky, ox * stride + kx)] += row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

fn mat_to_chw(mat: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    // mat is [h*w, c]; produce standard-layout [c, h, w].
    let t = mat.t().as_standard_layout().into_owned();
    t.into_shape_with_order((c, h, w)).expect("mat_to_chw")
}

pub(crate) fn conv2d_raw(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, ic, h, wd) = x.dim();
    let (oc, wic, kh, kw) = w.dim();
    assert_eq!(ic, wic, "conv2d: input channels {ic} != weight channels {wic}");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let w2 = w
        .to_shape((oc, ic * kh * kw))
        .expect("conv2d weight reshape")
        .to_owned();
    let per_sample = |i: usize| -> Array3<f64> {
        let xp = pad2d(&x.index_axis(Axis(0), i), pad);
        let cols = im2col(&xp.view(), kh, kw, stride, oh, ow);
        let out_mat = cols.dot(&w2.t()); // [oh*ow, oc]
        let mut out = mat_to_chw(&out_mat, oc, oh, ow);
        if let Some(bias) = b {
            for ch in 0..oc {
                out.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v + bias[ch]);
            }
        }
        out
    };
    let outs: Vec<Array3<f64>> = if n > 1 {
        (0..n).into_par_iter().map(per_sample).collect()
    } else {
        (0..n).map(per_sample).collect()
    };
    let mut out = Array4::zeros((n, oc, oh, ow));
    for (i, o) in outs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&o);
    }
    out
}

type ConvGrads = (Option<Array4<f64>>, Option<Array4<f64>>, Option<Array1<f64>>);

pub(crate) fn conv2d_grads(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    dout: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads {
    let (n, ic, h, wd) = x.dim();
    let (oc, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = dout.dim();
    let w2 = w
        .to_shape((oc, ic * kh * kw))
        .expect("conv2d weight reshape")
        .to_owned();
    let per_sample = |i: usize| {
        let dout_i = dout.index_axis(Axis(0), i);
        let dout_mat = dout_i
            .to_shape((oc, oh * ow))
            .expect("conv2d dout reshape")
            .to_owned(); // [oc, oh*ow]
        let mut dx_i = None;
        let mut dw_i = None;
        if need_dw {
            let xp = pad2d(&x.index_axis(Axis(0), i), pad);
            let cols = im2col(&xp.view(), kh, kw, stride, oh, ow);
            dw_i = Some(dout_mat.dot(&cols)); // [oc, ic*kh*kw]
        }
        if need_dx {
            let dcols = dout_mat.t().as_standard_layout().dot(&w2); // [oh*ow, ic*kh*kw]
            let dxp = col2im(
                &dcols.view(),
                ic,
                h + 2 * pad,
                wd + 2 * pad,
                kh,
                kw,
                stride,
                oh,
                ow,
            );
            dx_i = Some(
                dxp.slice(ndarray::s![.., pad..pad + h, pad..pad + wd])
                    .to_owned(),
            );
        }
        let db_i = dout_i.sum_axis(Axis(2)).sum_axis(Axis(1)); // [oc]
        (dx_i, dw_i, db_i)
    };
    let parts: Vec<_> = if n > 1 {
        (0..n).into_par_iter().map(per_sample).collect()
    } else {
        (0..n).map(per_sample).collect()
    };
    let dx = if need_dx {
        let mut dx = Array4::zeros((n, ic, h, wd));
        for (i, (dxi, _, _)) in parts.iter().enumerate() {
            dx.index_axis_mut(Axis(0), i).assign(dxi.as_ref().unwrap());
        }
        Some(dx)
    } else {
        None
    };
    let dw = if need_dw {
        let mut acc = Array2::<f64>::zeros((oc, ic * kh * kw));
        for (_, dwi, _) in &parts {
            acc += dwi.as_ref().unwrap();
        }
        Some(
            acc.into_shape_with_order((oc, ic, kh, kw))
                .expect("conv2d dw reshape"),
        )
    } else {
        None
    };
    let mut db = Array1::zeros(oc);
    for (_, _, dbi) in &parts {
        db += dbi;
    }
    (dx, dw, Some(db))
}

pub(crate) fn conv_transpose2d_raw(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>, // [ic, oc, kh, kw]
    b: Option<&Array1<f64>>,
    stride: usize,
) -> Array4<f64> {
    let (n, ic, h, wd) = x.dim();
    let (wic, oc, kh, kw) = w.dim();
    assert_eq!(ic, wic, "conv_transpose2d: channel mismatch");
    let hout = (h - 1) * stride + kh;
    let wout = (wd - 1) * stride + kw;
    let v2 = w
        .to_shape((ic, oc * kh * kw))
        .expect("conv_transpose weight reshape")
        .to_owned();
    let per_sample = |i: usize| -> Array3<f64> {
        let xi = x.index_axis(Axis(0), i);
        let x_mat = xi
            .to_shape((ic, h * wd))
            .expect("conv_transpose input reshape")
            .to_owned();
        let cols = x_mat.t().as_standard_layout().dot(&v2); // [h*w, oc*kh*kw]
        let mut out = col2im(&cols.view(), oc, hout, wout, kh, kw, stride, h, wd);
        if let Some(bias) = b {
            for ch in 0..oc {
                out.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v + bias[ch]);
            }
        }
        out
    };
    let outs: Vec<Array3<f64>> = if n > 1 {
        (0..n).into_par_iter().map(per_sample).collect()
    } else {
        (0..n).map(per_sample).collect()
    };
    let mut out = Array4::zeros((n, oc, hout, wout));
    for (i, o) in outs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&o);
    }
    out
}

pub(crate) fn conv_transpose2d_grads(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    dout: &ArrayView4<f64>,
    stride: usize,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads {
    let (n, ic, h, wd) = x.dim();
    let (_, oc, kh, kw) = w.dim();
    let v2 = w
        .to_shape((ic, oc * kh * kw))
        .expect("conv_transpose weight reshape")
        .to_owned();
    let per_sample = |i: usize| {
        let dout_i = dout.index_axis(Axis(0), i);
        // Windows of dout at the input grid (stride s) recover the columns.
        let dcols = im2col(&dout_i, kh, kw, stride, h, wd); // [h*w, oc*kh*kw]
        let mut dx_i = None;
        let mut dw_i = None;
        if need_dx {
            let dx_mat = dcols.dot(&v2.t()); // [h*w, ic]
            dx_i = Some(mat_to_chw(&dx_mat, ic, h, wd));
        }
        if need_dw {
            let xi = x.index_axis(Axis(0), i);
            let x_mat = xi
                .to_shape((ic, h * wd))
                .expect("conv_transpose input reshape")
                .to_owned();
            dw_i = Some(x_mat.dot(&dcols)); // [ic, oc*kh*kw]
        }
        let db_i = dout_i.sum_axis(Axis(2)).sum_axis(Axis(1));
        (dx_i, dw_i, db_i)
    };
    let parts: Vec<_> = if n > 1 {
        (0..n).into_par_iter().map(per_sample).collect()
    } else {
        (0..n).map(per_sample).collect()
    };
    let dx = if need_dx {
        let mut dx = Array4::zeros((n, ic, h, wd));
        for (i, (dxi, _, _)) in parts.iter().enumerate() {
            dx.index_axis_mut(Axis(0), i).assign(dxi.as_ref().unwrap());
        }
        Some(dx)
    } else {
        None
    };
    let dw = if need_dw {
        let mut acc = Array2::<f64>::zeros((ic, oc * kh * kw));
        for (_, dwi, _) in &parts {
            acc += dwi.as_ref().unwrap();
        }
        Some(
            acc.into_shape_with_order((ic, oc, kh, kw))
                .expect("conv_transpose dw reshape"),
        )
    } else {
        None
    };
    let mut db = Array1::zeros(oc);
    for (_, _, dbi) in &parts {
        db += dbi;
    }
    (dx, dw, Some(db))
}

fn view4(t: &Tensor) -> Array4<f64> {
    t.data()
        .view()
        .into_dimensionality::<Ix4>()
        .expect("expected a 4-d tensor")
        .to_owned()
}

/// Strided 2-D convolution with zero padding. `x` is `[N, C, H, W]`,
/// `w` is `[OC, C, KH, KW]`, `b` is `[OC]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xd = view4(x);
    let wd = view4(w);
    let bias = Array1::from_iter(b.data().iter().copied());
    let out = conv2d_raw(&xd.view(), &wd.view(), Some(&bias), stride, pad);
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, _| {
            let gd = g
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv2d grad dims");
            let xd = view4(&xc);
            let wd = view4(&wc);
            let (dx, dw, db) = conv2d_grads(
                &xd.view(),
                &wd.view(),
                &gd,
                stride,
                pad,
                xc.needs_grad(),
                wc.needs_grad(),
            );
            if let Some(dx) = dx {
                Tensor::accum_if_needed(&xc, dx.into_dyn());
            }
            if let Some(dw) = dw {
                Tensor::accum_if_needed(&wc, dw.into_dyn());
            }
            if let Some(db) = db {
                Tensor::accum_if_needed(&bc, db.into_dyn());
            }
        }),
    )
}

/// Transposed convolution (fractionally strided). `x` is `[N, C, H, W]`,
/// `w` is `[C, OC, KH, KW]`, output spatial dims are `(H-1)*stride + KH`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let xd = view4(x);
    let wd = view4(w);
    let bias = Array1::from_iter(b.data().iter().copied());
    let out = conv_transpose2d_raw(&xd.view(), &wd.view(), Some(&bias), stride);
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, _| {
            let gd = g
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv_transpose2d grad dims");
            let xd = view4(&xc);
            let wd = view4(&wc);
            let (dx, dw, db) = conv_transpose2d_grads(
                &xd.view(),
                &wd.view(),
                &gd,
                stride,
                xc.needs_grad(),
                wc.needs_grad(),
            );
            if let Some(dx) = dx {
                Tensor::accum_if_needed(&xc, dx.into_dyn());
            }
            if let Some(dw) = dw {
                Tensor::accum_if_needed(&wc, dw.into_dyn());
            }
            if let Some(db) = db {
                Tensor::accum_if_needed(&bc, db.into_dyn());
            }
        }),
    )
}
