//! Structured tensor ops: batch normalization, pixel shuffle, max pooling,
//! channel concatenation, channel softmax.

use super::Tensor;
use ndarray::{Array1, Array4, ArrayD, Axis, Ix4};
use std::cell::RefCell;
use std::rc::Rc;

fn as4(d: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    d.view().into_dimensionality::<Ix4>().expect("expected 4-d")
}

/// Per-channel statistics over the (N, H, W) axes of a `[N, C, H, W]` array.
fn channel_stats(x: &ndarray::ArrayView4<f64>) -> (Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ch in 0..c {
        let lane = x.index_axis(Axis(1), ch);
        let mu = lane.sum() / m;
        mean[ch] = mu;
        var[ch] = lane.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / m;
    }
    (mean, var)
}

fn broadcast_c(v: &Array1<f64>, like: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = like;
    let mut out = Array4::zeros((n, c, h, w));
    for ch in 0..c {
        out.index_axis_mut(Axis(1), ch).fill(v[ch]);
    }
    out
}

/// Batch normalization over a `[N, C, H, W]` tensor.
///
/// In training mode the batch statistics normalize the input and update the
/// running statistics in place (`running = (1-momentum)*running +
/// momentum*batch`, biased variance). In evaluation mode the running
/// statistics are used, which makes the output independent of batch
/// composition.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Rc<RefCell<Array1<f64>>>,
    running_var: &Rc<RefCell<Array1<f64>>>,
    training: bool,
    momentum: f64,
    eps: f64,
) -> Tensor {
    let xd = x.data();
    let xv = as4(&xd);
    let dims = xv.dim();
    let (mean, var) = if training {
        let (mean, var) = channel_stats(&xv);
        {
            let mut rm = running_mean.borrow_mut();
            let mut rv = running_var.borrow_mut();
            *rm = &*rm * (1.0 - momentum) + &mean * momentum;
            *rv = &*rv * (1.0 - momentum) + &var * momentum;
        }
        (mean, var)
    } else {
        (running_mean.borrow().clone(), running_var.borrow().clone())
    };
    let istd = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let gamma_d = Array1::from_iter(gamma.data().iter().copied());
    let beta_d = Array1::from_iter(beta.data().iter().copied());
    let mean_b = broadcast_c(&mean, dims);
    let scale_b = broadcast_c(&(&gamma_d * &istd), dims);
    let beta_b = broadcast_c(&beta_d, dims);
    let out = (&xv.to_owned() - &mean_b) * &scale_b + &beta_b;
    drop(xd);

    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _| {
            let xd = xc.data();
            let xv = as4(&xd);
            let (n, c, h, w) = xv.dim();
            let m = (n * h * w) as f64;
            let gv = as4(g);
            let gamma_d = Array1::from_iter(gc.data().iter().copied());
            let mut dgamma = Array1::zeros(c);
            let mut dbeta = Array1::zeros(c);
            let mut dx = Array4::zeros((n, c, h, w));
            for ch in 0..c {
                let xs = xv.index_axis(Axis(1), ch);
                let gs = gv.index_axis(Axis(1), ch);
                let mu = mean[ch];
                let istd_c = istd[ch];
                // dbeta, dgamma
                let mut sum_g = 0.0;
                let mut sum_g_xhat = 0.0;
                ndarray::Zip::from(&xs).and(&gs).for_each(|&xv_, &gv_| {
                    sum_g += gv_;
                    sum_g_xhat += gv_ * (xv_ - mu) * istd_c;
                });
                dbeta[ch] = sum_g;
                dgamma[ch] = sum_g_xhat;
                let gam = gamma_d[ch];
                if training {
                    // Backprop through the batch statistics.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xm = 0.0;
                    ndarray::Zip::from(&gs).and(&xs).for_each(|&gv_, &xv_| {
                        let dxhat = gv_ * gam;
                        sum_dxhat += dxhat;
                        sum_dxhat_xm += dxhat * (xv_ - mu);
                    });
                    let dvar = sum_dxhat_xm * (-0.5) * istd_c.powi(3);
                    let dmean = -sum_dxhat * istd_c; // sum(x - mu) = 0 exactly in expectation
                    let mut dxs = dx.index_axis_mut(Axis(1), ch);
                    ndarray::Zip::from(&mut dxs)
                        .and(&gs)
                        .and(&xs)
                        .for_each(|d, &gv_, &xv_| {
                            *d = gv_ * gam * istd_c
                                + dvar * 2.0 * (xv_ - mu) / m
                                + dmean / m;
                        });
                } else {
                    let mut dxs = dx.index_axis_mut(Axis(1), ch);
                    ndarray::Zip::from(&mut dxs).and(&gs).for_each(|d, &gv_| {
                        *d = gv_ * gam * istd_c;
                    });
                }
            }
            drop(xd);
            Tensor::accum_if_needed(&xc, dx.into_dyn());
            Tensor::accum_if_needed(&gc, dgamma.into_dyn());
            Tensor::accum_if_needed(&bc, dbeta.into_dyn());
        }),
    )
}

/// Channel-to-space rearrangement: `[N, C*r^2, H, W] -> [N, C, H*r, W*r]`.
/// Output element `(c, h*r+i, w*r+j)` is input element `(c*r^2 + i*r + j, h, w)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Tensor {
    let xd = x.data();
    let xv = as4(&xd);
    let (n, cin, h, w) = xv.dim();
    assert!(r >= 1 && cin % (r * r) == 0, "pixel_shuffle channel count");
    let c = cin / (r * r);
    let mut out = Array4::zeros((n, c, h * r, w * r));
    for ni in 0..n {
        for ch in 0..c {
            for hy in 0..h {
                for wx in 0..w {
                    for i in 0..r {
                        for j in 0..r {
                            out[(ni, ch, hy * r + i, wx * r + j)] =
                                xv[(ni, ch * r * r + i * r + j, hy, wx)];
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    let xc = x.clone();
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, _| {
            let gv = as4(g);
            let mut dx = Array4::zeros((n, cin, h, w));
            for ni in 0..n {
                for ch in 0..c {
                    for hy in 0..h {
                        for wx in 0..w {
                            for i in 0..r {
                                for j in 0..r {
                                    dx[(ni, ch * r * r + i * r + j, hy, wx)] =
                                        gv[(ni, ch, hy * r + i, wx * r + j)];
                                }
                            }
                        }
                    }
                }
            }
            Tensor::accum_if_needed(&xc, dx.into_dyn());
        }),
    )
}

/// 2×2 max pooling with stride 2. Spatial dims must be even.
pub fn max_pool2(x: &Tensor) -> Tensor {
    let xd = x.data();
    let xv = as4(&xd);
    let (n, c, h, w) = xv.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 requires even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, c, oh, ow));
    let mut arg: Vec<u8> = vec![0; n * c * oh * ow];
    let mut k = 0;
    for ni in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut which = 0u8;
                    for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = xv[(ni, ch, oy * 2 + dy, ox * 2 + dx)];
                        if v > best {
                            best = v;
                            which = q as u8;
                        }
                    }
                    out[(ni, ch, oy, ox)] = best;
                    arg[k] = which;
                    k += 1;
                }
            }
        }
    }
    drop(xd);
    let xc = x.clone();
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, _| {
            let gv = as4(g);
            let mut dx = Array4::zeros((n, c, h, w));
            let offsets = [(0usize, 0usize), (0, 1), (1, 0), (1, 1)];
            let mut k = 0;
            for ni in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (dy, dxo) = offsets[arg[k] as usize];
                            dx[(ni, ch, oy * 2 + dy, ox * 2 + dxo)] += gv[(ni, ch, oy, ox)];
                            k += 1;
                        }
                    }
                }
            }
            Tensor::accum_if_needed(&xc, dx.into_dyn());
        }),
    )
}

/// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let datas: Vec<_> = parts.iter().map(|t| t.data().clone()).collect();
    let views: Vec<_> = datas.iter().map(|d| d.view()).collect();
    let out = ndarray::concatenate(Axis(1), &views).expect("concat_channels shape");
    let ranges: Vec<usize> = datas.iter().map(|d| d.shape()[1]).collect();
    let owned: Vec<Tensor> = parts.to_vec();
    Tensor::from_op(
        out,
        parts.to_vec(),
        Box::new(move |g, _| {
            let mut start = 0;
            for (t, &c) in owned.iter().zip(ranges.iter()) {
                let piece = g
                    .slice_axis(Axis(1), ndarray::Slice::from(start..start + c))
                    .to_owned();
                Tensor::accum_if_needed(t, piece);
                start += c;
            }
        }),
    )
}

/// Softmax over the channel axis of a `[N, C, H, W]` tensor.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let xd = x.data();
    let xv = as4(&xd);
    let (n, c, h, w) = xv.dim();
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for hy in 0..h {
            for wx in 0..w {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(xv[(ni, ch, hy, wx)]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (xv[(ni, ch, hy, wx)] - mx).exp();
                    out[(ni, ch, hy, wx)] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[(ni, ch, hy, wx)] /= z;
                }
            }
        }
    }
    drop(xd);
    let xc = x.clone();
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, out_data| {
            let gv = as4(g);
            let yv = as4(out_data);
            let mut dx = Array4::zeros((n, c, h, w));
            for ni in 0..n {
                for hy in 0..h {
                    for wx in 0..w {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += gv[(ni, ch, hy, wx)] * yv[(ni, ch, hy, wx)];
                        }
                        for ch in 0..c {
                            let y = yv[(ni, ch, hy, wx)];
                            dx[(ni, ch, hy, wx)] = y * (gv[(ni, ch, hy, wx)] - dot);
                        }
                    }
                }
            }
            Tensor::accum_if_needed(&xc, dx.into_dyn());
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testutil::{check_input_grad, finite_diff, max_rel_err};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random::<f64>() * 2.0 - 1.0)
    }

    fn fresh_stats(c: usize) -> (Rc<RefCell<Array1<f64>>>, Rc<RefCell<Array1<f64>>>) {
        (
            Rc::new(RefCell::new(Array1::zeros(c))),
            Rc::new(RefCell::new(Array1::ones(c))),
        )
    }

    #[test]
    fn batch_norm_training_normalizes_batch() {
        let x = Tensor::leaf(randn(&[4, 3, 5, 5], 1).mapv(|v| v * 3.0 + 1.0));
        let gamma = Tensor::leaf(ArrayD::ones(IxDyn(&[3])));
        let beta = Tensor::leaf(ArrayD::zeros(IxDyn(&[3])));
        let (rm, rv) = fresh_stats(3);
        let y = batch_norm(&x, &gamma, &beta, &rm, &rv, true, 0.1, 1e-5);
        let yd = y.data();
        let yv = yd.view().into_dimensionality::<Ix4>().unwrap();
        let (mean, var) = channel_stats(&yv);
        for ch in 0..3 {
            assert!(mean[ch].abs() < 1e-10);
            assert!((var[ch] - 1.0).abs() < 1e-3);
        }
        // running stats moved toward batch stats
        assert!(rm.borrow().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batch_norm_training_gradient_matches_fd() {
        let x0 = randn(&[2, 2, 4, 4], 3);
        let g0 = randn(&[2], 4).mapv(|v| v + 1.5);
        let b0 = randn(&[2], 5);
        let build = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let (rm, rv) = fresh_stats(2);
            batch_norm(x, g, b, &rm, &rv, true, 0.1, 1e-5)
                .square()
                .mean_all()
        };
        let x = Tensor::param(x0.clone());
        let g = Tensor::param(g0.clone());
        let b = Tensor::param(b0.clone());
        build(&x, &g, &b).backward();
        let fd_x = finite_diff(
            &mut |a| build(&Tensor::leaf(a.clone()), &Tensor::leaf(g0.clone()), &Tensor::leaf(b0.clone())).value(),
            &x0,
            1e-5,
        );
        let fd_g = finite_diff(
            &mut |a| build(&Tensor::leaf(x0.clone()), &Tensor::leaf(a.clone()), &Tensor::leaf(b0.clone())).value(),
            &g0,
            1e-5,
        );
        let fd_b = finite_diff(
            &mut |a| build(&Tensor::leaf(x0.clone()), &Tensor::leaf(g0.clone()), &Tensor::leaf(a.clone())).value(),
            &b0,
            1e-5,
        );
        assert!(max_rel_err(&x.grad().unwrap(), &fd_x) < 1e-4);
        assert!(max_rel_err(&g.grad().unwrap(), &fd_g) < 1e-4);
        assert!(max_rel_err(&b.grad().unwrap(), &fd_b) < 1e-4);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let x = Tensor::leaf(randn(&[2, 2, 3, 3], 6));
        let gamma = Tensor::leaf(ArrayD::ones(IxDyn(&[2])));
        let beta = Tensor::leaf(ArrayD::zeros(IxDyn(&[2])));
        let (rm, rv) = fresh_stats(2);
        rm.borrow_mut().fill(0.5);
        rv.borrow_mut().fill(4.0);
        let y = batch_norm(&x, &gamma, &beta, &rm, &rv, false, 0.1, 0.0);
        let want = x.data().mapv(|v| (v - 0.5) / 2.0);
        assert!(y
            .data()
            .iter()
            .zip(want.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        // eval mode must not touch the running stats
        assert!(rm.borrow().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pixel_shuffle_matches_index_oracle() {
        let x0 = randn(&[1, 8, 2, 2], 9);
        let x = Tensor::leaf(x0.clone());
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), vec![1, 2, 4, 4]);
        let yd = y.data();
        let yv = yd.view().into_dimensionality::<Ix4>().unwrap();
        let xv = x0.view().into_dimensionality::<Ix4>().unwrap();
        for c in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    for i in 0..2 {
                        for j in 0..2 {
                            assert_eq!(
                                yv[(0, c, h * 2 + i, w * 2 + j)],
                                xv[(0, c * 4 + i * 2 + j, h, w)]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_is_value_preserving_and_differentiable() {
        let x0 = randn(&[2, 12, 3, 3], 10);
        let x = Tensor::leaf(x0.clone());
        let y = pixel_shuffle(&x, 2);
        let mut a: Vec<u64> = x0.iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        check_input_grad(&|x| pixel_shuffle(x, 2).square().sum_all(), &x0, 1e-6);
    }

    #[test]
    fn max_pool2_gradient_routes_to_argmax() {
        let x0 = randn(&[1, 2, 4, 4], 12);
        check_input_grad(&|x| max_pool2(x).square().sum_all(), &x0, 1e-6);
    }

    #[test]
    fn concat_channels_splits_gradient() {
        let a0 = randn(&[2, 2, 3, 3], 13);
        let b0 = randn(&[2, 3, 3, 3], 14);
        let a = Tensor::param(a0.clone());
        let b = Tensor::param(b0.clone());
        let y = concat_channels(&[a.clone(), b.clone()]);
        assert_eq!(y.shape(), vec![2, 5, 3, 3]);
        y.mul_scalar(2.0).sum_all().backward();
        assert!(a.grad().unwrap().iter().all(|&g| g == 2.0));
        assert!(b.grad().unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn softmax_channels_normalizes_and_matches_fd() {
        let x0 = randn(&[1, 4, 3, 3], 15);
        let y = softmax_channels(&Tensor::leaf(x0.clone()));
        let yd = y.data();
        let yv = yd.view().into_dimensionality::<Ix4>().unwrap();
        for h in 0..3 {
            for w in 0..3 {
                let s: f64 = (0..4).map(|c| yv[(0, c, h, w)]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // weighted sum to get a non-trivial gradient through the coupling
        let w0 = randn(&[1, 4, 3, 3], 16);
        let wt = Tensor::leaf(w0);
        check_input_grad(
            &|x| softmax_channels(x).mul(&wt).sum_all(),
            &x0,
            1e-6,
        );
    }
}
