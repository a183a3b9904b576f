//! Dense f64 kernels behind the graph ops: 2D convolution, pooling,
//! upsampling and their gradients.
//!
//! Parallel execution only ever splits work across disjoint output regions
//! and keeps every floating-point reduction in a fixed sequential order, so
//! results are bit-identical across schedules and thread counts.

use ndarray::{Array1, Array2, Array4, ArrayView4};

use crate::exec::{self, Exec};

fn pad_input(x: &ArrayView4<'_, f64>, pad: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    if pad == 0 {
        return x.to_owned();
    }
    let mut xp = Array4::<f64>::zeros((n, c, h + 2 * pad, w + 2 * pad));
    xp.slice_mut(ndarray::s![.., .., pad..pad + h, pad..pad + w])
        .assign(x);
    xp
}

pub fn conv2d_output_size(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// `out[n,o] = b[o] + sum_c x[n,c] * w[o,c]` (cross-correlation).
pub fn conv2d_forward(
    x: &ArrayView4<'_, f64>,
    w: &ArrayView4<'_, f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
    exec: Exec,
) -> Array4<f64> {
    let (n, c_in, h, width) = x.dim();
    let (c_out, c_in_w, kh, kw) = w.dim();
    assert_eq!(c_in, c_in_w, "conv2d channel mismatch");
    assert_eq!(b.len(), c_out);
    let (ho, wo) = conv2d_output_size(h, width, kh.max(kw), stride, pad);

    let xp = pad_input(x, pad);
    let xp_slice = xp.as_slice().expect("standard layout");
    let (hp, wp) = (h + 2 * pad, width + 2 * pad);
    let w_std = w.as_standard_layout();
    let w_slice = w_std.as_slice().expect("standard layout");

    let mut out = vec![0f64; n * c_out * ho * wo];
    exec::for_each_chunk_mut(&mut out, ho * wo, exec, |plane_idx, plane| {
        let ni = plane_idx / c_out;
        let o = plane_idx % c_out;
        plane.fill(b[o]);
        for c in 0..c_in {
            let x_base = (ni * c_in + c) * hp * wp;
            for i in 0..kh {
                for j in 0..kw {
                    let wv = w_slice[((o * c_in + c) * kh + i) * kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    for yo in 0..ho {
                        let row = x_base + (yo * stride + i) * wp + j;
                        let dst = &mut plane[yo * wo..(yo + 1) * wo];
                        if stride == 1 {
                            let src = &xp_slice[row..row + wo];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for (xo, d) in dst.iter_mut().enumerate() {
                                *d += wv * xp_slice[row + xo * stride];
                            }
                        }
                    }
                }
            }
        }
    });

    Array4::from_shape_vec((n, c_out, ho, wo), out).expect("shape")
}

/// Gradients of [`conv2d_forward`] w.r.t. input, kernel and bias.
pub fn conv2d_backward(
    x: &ArrayView4<'_, f64>,
    w: &ArrayView4<'_, f64>,
    dout: &ArrayView4<'_, f64>,
    stride: usize,
    pad: usize,
    exec: Exec,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, c_in, h, width) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = dout.dim();
    let (hp, wp) = (h + 2 * pad, width + 2 * pad);

    let xp = pad_input(x, pad);
    let xp_slice = xp.as_slice().expect("standard layout");
    let w_std = w.as_standard_layout();
    let w_slice = w_std.as_slice().expect("standard layout");
    let dout_std = dout.as_standard_layout();
    let dout_slice = dout_std.as_slice().expect("standard layout");

    // db: fixed order over (n, ho, wo) per output channel.
    let db_vec = exec::map_collect(c_out, exec, |o| {
        let mut acc = 0.0;
        for ni in 0..n {
            let base = (ni * c_out + o) * ho * wo;
            for v in &dout_slice[base..base + ho * wo] {
                acc += v;
            }
        }
        acc
    });
    let db = Array1::from_vec(db_vec);

    // dw: one task per output channel writes its own [c_in, kh, kw] block.
    let mut dw = vec![0f64; c_out * c_in * kh * kw];
    exec::for_each_chunk_mut(&mut dw, c_in * kh * kw, exec, |o, block| {
        for c in 0..c_in {
            for i in 0..kh {
                for j in 0..kw {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let g_base = (ni * c_out + o) * ho * wo;
                        let x_base = (ni * c_in + c) * hp * wp;
                        for yo in 0..ho {
                            let g_row = &dout_slice[g_base + yo * wo..g_base + (yo + 1) * wo];
                            let x_row = x_base + (yo * stride + i) * wp + j;
                            if stride == 1 {
                                let xs = &xp_slice[x_row..x_row + wo];
                                for (g, xv) in g_row.iter().zip(xs) {
                                    acc += g * xv;
                                }
                            } else {
                                for (xo, g) in g_row.iter().enumerate() {
                                    acc += g * xp_slice[x_row + xo * stride];
                                }
                            }
                        }
                    }
                    block[(c * kh + i) * kw + j] = acc;
                }
            }
        }
    });
    let dw = Array4::from_shape_vec((c_out, c_in, kh, kw), dw).expect("shape");

    // dx: one task per batch item scatters into its own padded plane set.
    let mut dxp = vec![0f64; n * c_in * hp * wp];
    exec::for_each_chunk_mut(&mut dxp, c_in * hp * wp, exec, |ni, planes| {
        for o in 0..c_out {
            let g_base = (ni * c_out + o) * ho * wo;
            for yo in 0..ho {
                for xo in 0..wo {
                    let g = dout_slice[g_base + yo * wo + xo];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..c_in {
                        let w_base = (o * c_in + c) * kh * kw;
                        let p_base = c * hp * wp;
                        for i in 0..kh {
                            let dst = p_base + (yo * stride + i) * wp + xo * stride;
                            let ws = &w_slice[w_base + i * kw..w_base + (i + 1) * kw];
                            let dp = &mut planes[dst..dst + kw];
                            for (d, wv) in dp.iter_mut().zip(ws) {
                                *d += g * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    let dxp = Array4::from_shape_vec((n, c_in, hp, wp), dxp).expect("shape");
    let dx = dxp
        .slice(ndarray::s![.., .., pad..pad + h, pad..pad + width])
        .to_owned();

    (dx, dw, db)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x_forward(x: &ArrayView4<'_, f64>, exec: Exec) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let mut out = vec![0f64; n * c * 4 * h * w];
    exec::for_each_chunk_mut(&mut out, 4 * h * w, exec, |plane, dst| {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let r0 = 2 * y * 2 * w + 2 * x;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + 2 * w] = v;
                dst[r0 + 2 * w + 1] = v;
            }
        }
    });
    Array4::from_shape_vec((n, c, 2 * h, 2 * w), out).expect("shape")
}

pub fn upsample2x_backward(dout: &ArrayView4<'_, f64>, exec: Exec) -> Array4<f64> {
    let (n, c, h2, w2) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let d_std = dout.as_standard_layout();
    let ds = d_std.as_slice().expect("standard layout");
    let mut out = vec![0f64; n * c * h * w];
    exec::for_each_chunk_mut(&mut out, h * w, exec, |plane, dst| {
        let src = &ds[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h {
            for x in 0..w {
                let r0 = 2 * y * w2 + 2 * x;
                dst[y * w + x] = src[r0] + src[r0 + 1] + src[r0 + w2] + src[r0 + w2 + 1];
            }
        }
    });
    Array4::from_shape_vec((n, c, h, w), out).expect("shape")
}

/// 2x2 average pooling; spatial dims must be even.
pub fn avgpool2x_forward(x: &ArrayView4<'_, f64>, exec: Exec) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2x needs even dims, got {h}x{w}");
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0f64; n * c * ho * wo];
    exec::for_each_chunk_mut(&mut out, ho * wo, exec, |plane, dst| {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let r0 = 2 * y * w + 2 * x;
                dst[y * wo + x] = 0.25 * (src[r0] + src[r0 + 1] + src[r0 + w] + src[r0 + w + 1]);
            }
        }
    });
    Array4::from_shape_vec((n, c, ho, wo), out).expect("shape")
}

pub fn avgpool2x_backward(dout: &ArrayView4<'_, f64>, exec: Exec) -> Array4<f64> {
    let (n, c, ho, wo) = dout.dim();
    let (h, w) = (2 * ho, 2 * wo);
    let d_std = dout.as_standard_layout();
    let ds = d_std.as_slice().expect("standard layout");
    let mut out = vec![0f64; n * c * h * w];
    exec::for_each_chunk_mut(&mut out, h * w, exec, |plane, dst| {
        let src = &ds[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let g = 0.25 * src[y * wo + x];
                let r0 = 2 * y * w + 2 * x;
                dst[r0] = g;
                dst[r0 + 1] = g;
                dst[r0 + w] = g;
                dst[r0 + w + 1] = g;
            }
        }
    });
    Array4::from_shape_vec((n, c, h, w), out).expect("shape")
}

/// `x [N, F] . w [F, O] + b [O]`.
pub fn linear_forward(x: &Array2<f64>, w: &Array2<f64>, b: &[f64]) -> Array2<f64> {
    let mut out = x.dot(w);
    for mut row in out.rows_mut() {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    out
}

pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dout.dot(&w.t());
    let dw = x.t().dot(dout);
    let db = dout.sum_axis(ndarray::Axis(0));
    (dx, dw, db)
}

/// Nearest-neighbor resize of a one-hot mask stack to (h_out, w_out).
pub fn resize_nearest(x: &ArrayView4<'_, f64>, h_out: usize, w_out: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h_out, w_out), |(ni, ci, y, xi)| {
        let sy = (y * h) / h_out;
        let sx = (xi * w) / w_out;
        x[[ni, ci, sy, sx]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn rng_array4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        Array4::from_shape_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn conv_matches_hand_computed_example() {
        // 1x1x3x3 input, single 2x2 kernel, stride 1, no padding.
        let x = Array4::from_shape_vec(
            (1, 1, 3, 3),
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
        )
        .unwrap();
        let w = Array4::from_shape_vec((1, 1, 2, 2), vec![1., 0., 0., -1.]).unwrap();
        let out = conv2d_forward(&x.view(), &w.view(), &[0.5], 1, 0, Exec::Sequential);
        // Each output = x[y][x] - x[y+1][x+1] + 0.5 = -4 + 0.5.
        for &v in out.iter() {
            assert!((v + 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rng_array4((2, 3, 5, 6), 7);
        let w = rng_array4((4, 3, 3, 3), 13);
        let b = vec![0.1, -0.2, 0.3, 0.0];
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &[f64]| -> f64 {
                let out = conv2d_forward(&x.view(), &w.view(), b, stride, pad, Exec::Sequential);
                // Weighted sum so every output position has a distinct pull.
                out.indexed_iter()
                    .map(|((n, o, y, xx), &v)| v * ((n + 2 * o + 3 * y + 5 * xx) as f64 * 0.01 + 0.3))
                    .sum()
            };
            let out = conv2d_forward(&x.view(), &w.view(), &b, stride, pad, Exec::Sequential);
            let dout = Array4::from_shape_fn(out.dim(), |(n, o, y, xx)| {
                (n + 2 * o + 3 * y + 5 * xx) as f64 * 0.01 + 0.3
            });
            let (dx, dw, db) =
                conv2d_backward(&x.view(), &w.view(), &dout.view(), stride, pad, Exec::Sequential);

            let h = 1e-6;
            for &idx in &[(0usize, 0usize, 0usize, 0usize), (1, 2, 3, 4), (0, 1, 2, 2)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
                assert!(
                    (fd - dx[idx]).abs() < 1e-5 * fd.abs().max(1.0),
                    "dx {idx:?} stride {stride}: fd {fd} vs {}",
                    dx[idx]
                );
            }
            for &idx in &[(0usize, 0usize, 0usize, 0usize), (3, 2, 1, 1), (2, 1, 2, 0)] {
                let mut wp = w.clone();
                wp[idx] += h;
                let mut wm = w.clone();
                wm[idx] -= h;
                let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
                assert!(
                    (fd - dw[idx]).abs() < 1e-5 * fd.abs().max(1.0),
                    "dw {idx:?} stride {stride}: fd {fd} vs {}",
                    dw[idx]
                );
            }
            for o in 0..4 {
                let mut bp = b.clone();
                bp[o] += h;
                let mut bm = b.clone();
                bm[o] -= h;
                let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
                assert!((fd - db[o]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let x = rng_array4((2, 4, 8, 8), 3);
        let w = rng_array4((5, 4, 3, 3), 11);
        let b = vec![0.0; 5];
        let a = conv2d_forward(&x.view(), &w.view(), &b, 1, 1, Exec::Sequential);
        let bq = conv2d_forward(&x.view(), &w.view(), &b, 1, 1, Exec::default());
        assert_eq!(a, bq);
        let dout = rng_array4(a.dim(), 17);
        let (dx0, dw0, db0) =
            conv2d_backward(&x.view(), &w.view(), &dout.view(), 1, 1, Exec::Sequential);
        let (dx1, dw1, db1) =
            conv2d_backward(&x.view(), &w.view(), &dout.view(), 1, 1, Exec::default());
        assert_eq!(dx0, dx1);
        assert_eq!(dw0, dw1);
        assert_eq!(db0, db1);
    }

    #[test]
    fn upsample_and_pool_invert_shapes() {
        let x = rng_array4((1, 2, 4, 4), 5);
        let up = upsample2x_forward(&x.view(), Exec::Sequential);
        assert_eq!(up.dim(), (1, 2, 8, 8));
        assert_eq!(up[[0, 0, 5, 5]], x[[0, 0, 2, 2]]);
        let down = avgpool2x_forward(&up.view(), Exec::Sequential);
        for (a, b) in down.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn resize_nearest_identity_and_downscale() {
        let x = rng_array4((1, 3, 8, 8), 9);
        let same = resize_nearest(&x.view(), 8, 8);
        assert_eq!(same, x);
        let half = resize_nearest(&x.view(), 4, 4);
        assert_eq!(half[[0, 1, 2, 3]], x[[0, 1, 4, 6]]);
    }
}
