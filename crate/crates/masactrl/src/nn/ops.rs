//! Layer primitives on per-sample tensors (`[C, H, W]` feature maps,
//! `[rows, dim]` token matrices), each with a hand-written backward pass.
//!
//! Backward functions take the forward input and recompute cheap
//! intermediates (normalization statistics, attention maps) instead of
//! caching them; the calling tape only stores activations at layer
//! boundaries.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

use crate::real::Real;

const GN_EPS: f64 = 1e-5;

fn im2col<F: Real>(
    x: &Array3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[(row, base + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

fn col2im<F: Real>(
    dcol: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<F> {
    let mut dx = Array3::zeros((cin, h, w));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci, iy as usize, ix as usize)] += dcol[(row, base + ox)];
                    }
                }
            }
        }
    }
    dx
}

pub fn conv_out_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

/// 2-D convolution, `x: [Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
pub fn conv2d<F: Real>(
    x: &Array3<F>,
    w: ArrayView4<F>,
    b: ArrayView1<F>,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (cout, cin, kh, kw) = w.dim();
    let (xc, h, wd) = x.dim();
    debug_assert_eq!(cin, xc);
    let ho = conv_out_side(h, kh, stride, pad);
    let wo = conv_out_side(wd, kw, stride, pad);
    let col = im2col(x, kh, kw, stride, pad, ho, wo);
    let w_mat = w.to_shape((cout, cin * kh * kw)).unwrap();
    let mut y = w_mat.dot(&col);
    for (mut row, &bias) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    y.into_shape_with_order((cout, ho, wo)).unwrap()
}

/// Backward of [`conv2d`]; returns `(dx, dw, db)`.
pub fn conv2d_bwd<F: Real>(
    x: &Array3<F>,
    w: ArrayView4<F>,
    dy: &Array3<F>,
    stride: usize,
    pad: usize,
) -> (Array3<F>, Array4<F>, Array1<F>) {
    let (cout, cin, kh, kw) = w.dim();
    let (_, h, wd) = x.dim();
    let (dyc, ho, wo) = dy.dim();
    debug_assert_eq!(dyc, cout);
    let dy_mat = dy.to_shape((cout, ho * wo)).unwrap();
    let db = dy_mat.sum_axis(Axis(1));
    let col = im2col(x, kh, kw, stride, pad, ho, wo);
    let dw_mat = dy_mat.dot(&col.t());
    let dw = dw_mat.into_shape_with_order((cout, cin, kh, kw)).unwrap();
    let w_mat = w.to_shape((cout, cin * kh * kw)).unwrap();
    let dcol = w_mat.t().dot(&dy_mat);
    let dx = col2im(&dcol, cin, h, wd, kh, kw, stride, pad, ho, wo);
    (dx, dw, db)
}

fn group_stats<F: Real>(x: &Array3<F>, groups: usize) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = x.dim();
    let per = c / groups;
    let m = (per * h * w) as f64;
    let mut means = Vec::with_capacity(groups);
    let mut rstds = Vec::with_capacity(groups);
    for g in 0..groups {
        let sl = x.slice(ndarray::s![g * per..(g + 1) * per, .., ..]);
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for &v in sl.iter() {
            let v = v.to_f64c();
            sum += v;
            sq += v * v;
        }
        let mean = sum / m;
        let var = (sq / m - mean * mean).max(0.0);
        means.push(mean);
        rstds.push(1.0 / (var + GN_EPS).sqrt());
    }
    (means, rstds)
}

/// Group normalization with per-channel affine parameters.
pub fn group_norm<F: Real>(
    x: &Array3<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
    groups: usize,
) -> Array3<F> {
    let (c, _, _) = x.dim();
    debug_assert_eq!(c % groups, 0, "channels must divide into groups");
    let per = c / groups;
    let (means, rstds) = group_stats(x, groups);
    let mut y = x.clone();
    for (ci, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
        let g = ci / per;
        let mu = F::c(means[g]);
        let r = F::c(rstds[g]);
        let (ga, be) = (gamma[ci], beta[ci]);
        plane.mapv_inplace(|v| (v - mu) * r * ga + be);
    }
    y
}

/// Backward of [`group_norm`]; returns `(dx, dgamma, dbeta)`.
pub fn group_norm_bwd<F: Real>(
    x: &Array3<F>,
    gamma: ArrayView1<F>,
    dy: &Array3<F>,
    groups: usize,
) -> (Array3<F>, Array1<F>, Array1<F>) {
    let (c, h, w) = x.dim();
    let per = c / groups;
    let m = F::c((per * h * w) as f64);
    let (means, rstds) = group_stats(x, groups);
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    let mut dx = Array3::zeros((c, h, w));
    for g in 0..groups {
        let mu = F::c(means[g]);
        let r = F::c(rstds[g]);
        // Accumulate the two group-wide reductions over x̂ and dx̂.
        let mut sum_dxh = F::zero();
        let mut sum_dxh_xh = F::zero();
        for ci in g * per..(g + 1) * per {
            let ga = gamma[ci];
            for i in 0..h {
                for j in 0..w {
                    let xh = (x[(ci, i, j)] - mu) * r;
                    let d = dy[(ci, i, j)];
                    dgamma[ci] += d * xh;
                    dbeta[ci] += d;
                    let dxh = d * ga;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
            }
        }
        let inv_m = F::one() / m;
        for ci in g * per..(g + 1) * per {
            let ga = gamma[ci];
            for i in 0..h {
                for j in 0..w {
                    let xh = (x[(ci, i, j)] - mu) * r;
                    let dxh = dy[(ci, i, j)] * ga;
                    dx[(ci, i, j)] = r * (dxh - (sum_dxh + xh * sum_dxh_xh) * inv_m);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn sigmoid<F: Real>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

pub fn silu<F: Real, D: ndarray::Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_bwd<F: Real, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = x.clone();
    dx.zip_mut_with(dy, |xv, &d| {
        let s = sigmoid(*xv);
        *xv = d * s * (F::one() + *xv * (F::one() - s));
    });
    dx
}

/// Row-wise affine map: `y = x·wᵀ + b`, `x: [n, din]`, `w: [dout, din]`.
pub fn linear<F: Real>(x: &Array2<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    for (mut row, _) in y.axis_iter_mut(Axis(0)).zip(0..) {
        row.zip_mut_with(&b, |v, &bias| *v += bias);
    }
    y
}

/// Backward of [`linear`]; returns `(dx, dw, db)`.
pub fn linear_bwd<F: Real>(
    x: &Array2<F>,
    w: ArrayView2<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = dy.dot(&w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample_nearest2<F: Real>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(ci, i, j)];
                y[(ci, 2 * i, 2 * j)] = v;
                y[(ci, 2 * i + 1, 2 * j)] = v;
                y[(ci, 2 * i, 2 * j + 1)] = v;
                y[(ci, 2 * i + 1, 2 * j + 1)] = v;
            }
        }
    }
    y
}

/// Backward of [`upsample_nearest2`]: sums each 2×2 block.
pub fn upsample_nearest2_bwd<F: Real>(dy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                dx[(ci, i, j)] = dy[(ci, 2 * i, 2 * j)]
                    + dy[(ci, 2 * i + 1, 2 * j)]
                    + dy[(ci, 2 * i, 2 * j + 1)]
                    + dy[(ci, 2 * i + 1, 2 * j + 1)];
            }
        }
    }
    dx
}

/// Sinusoidal timestep embedding, half sine / half cosine with log-spaced
/// frequencies.
pub fn sinusoidal_embedding<F: Real>(t: usize, dim: usize) -> Array1<F> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[i] = F::c(angle.sin());
        out[half + i] = F::c(angle.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || f64::std_normal(&mut rng))
    }

    fn randn2(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn(shape, || f64::std_normal(&mut rng))
    }

    /// Central finite difference of a scalar loss over one tensor.
    fn fd_grad(
        mut f: impl FnMut(&ArrayD<f64>) -> f64,
        at: &ArrayD<f64>,
        step: f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(at.raw_dim());
        for idx in ndarray::indices(at.raw_dim()) {
            let mut plus = at.clone();
            plus[&idx] += step;
            let mut minus = at.clone();
            minus[&idx] -= step;
            g[&idx] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        g
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64, what: &str) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-4);
            assert!(
                ((x - y) / denom).abs() < tol,
                "{what}: {x} vs {y} (rel {})",
                ((x - y) / denom).abs()
            );
        }
    }

    /// Naive direct convolution as the oracle.
    fn conv2d_naive(
        x: &Array3<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array3<f64> {
        let (cout, cin, kh, kw) = w.dim();
        let (_, h, wd) = x.dim();
        let ho = conv_out_side(h, kh, stride, pad);
        let wo = conv_out_side(wd, kw, stride, pad);
        let mut y = Array3::zeros((cout, ho, wo));
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[(ci, iy as usize, ix as usize)]
                                        * w[(co, ci, ki, kj)];
                                }
                            }
                        }
                    }
                    y[(co, oy, ox)] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
            let x = randn3((3, 8, 8), 1 + stride as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let w = Array4::from_shape_simple_fn((4, 3, k, k), || f64::std_normal(&mut rng));
            let b = Array1::from_shape_simple_fn(4, || f64::std_normal(&mut rng));
            let got = conv2d(&x, w.view(), b.view(), stride, pad);
            let want = conv2d_naive(&x, &w, &b, stride, pad);
            assert_close(
                &got.into_dyn(),
                &want.into_dyn(),
                1e-10,
                "conv forward",
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let x = randn3((2, 5, 5), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Array4::from_shape_simple_fn((3, 2, 3, 3), || f64::std_normal(&mut rng));
        let b = Array1::from_shape_simple_fn(3, || f64::std_normal(&mut rng));
        // Fixed cotangent projects output to a scalar.
        let ct = randn3((3, 5, 5), 4);
        let loss = |y: &Array3<f64>| y.iter().zip(ct.iter()).map(|(a, b)| a * b).sum::<f64>();

        let (dx, dw, db) = {
            let y = conv2d(&x, w.view(), b.view(), 1, 1);
            let _ = y;
            conv2d_bwd(&x, w.view(), &ct, 1, 1)
        };
        let fdx = fd_grad(
            |xp| {
                let xp3: Array3<f64> = xp.clone().into_dimensionality().unwrap();
                loss(&conv2d(&xp3, w.view(), b.view(), 1, 1))
            },
            &x.clone().into_dyn(),
            1e-5,
        );
        assert_close(&dx.into_dyn(), &fdx, 1e-6, "conv dx");
        let fdw = fd_grad(
            |wp| {
                let wp4: Array4<f64> = wp.clone().into_dimensionality().unwrap();
                loss(&conv2d(&x, wp4.view(), b.view(), 1, 1))
            },
            &w.clone().into_dyn(),
            1e-5,
        );
        assert_close(&dw.into_dyn(), &fdw, 1e-6, "conv dw");
        let fdb = fd_grad(
            |bp| {
                let bp1: Array1<f64> = bp.clone().into_dimensionality().unwrap();
                loss(&conv2d(&x, w.view(), bp1.view(), 1, 1))
            },
            &b.clone().into_dyn(),
            1e-5,
        );
        assert_close(&db.into_dyn(), &fdb, 1e-6, "conv db");
    }

    #[test]
    fn group_norm_normalizes_and_matches_finite_differences() {
        let x = randn3((4, 3, 3), 5);
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let y = group_norm(&x, gamma.view(), beta.view(), 2);
        // Each group has near-zero mean and near-unit variance.
        for g in 0..2 {
            let sl = y.slice(ndarray::s![g * 2..(g + 1) * 2, .., ..]);
            let m: f64 = sl.iter().sum::<f64>() / sl.len() as f64;
            let v: f64 = sl.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / sl.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-3);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gamma = Array1::from_shape_simple_fn(4, || f64::std_normal(&mut rng));
        let beta = Array1::from_shape_simple_fn(4, || f64::std_normal(&mut rng));
        let ct = randn3((4, 3, 3), 7);
        let loss = |y: &Array3<f64>| y.iter().zip(ct.iter()).map(|(a, b)| a * b).sum::<f64>();
        let (dx, dgamma, dbeta) = group_norm_bwd(&x, gamma.view(), &ct, 2);
        let fdx = fd_grad(
            |xp| {
                let xp3: Array3<f64> = xp.clone().into_dimensionality().unwrap();
                loss(&group_norm(&xp3, gamma.view(), beta.view(), 2))
            },
            &x.clone().into_dyn(),
            1e-5,
        );
        assert_close(&dx.into_dyn(), &fdx, 1e-5, "gn dx");
        let fdg = fd_grad(
            |gp| {
                let g1: Array1<f64> = gp.clone().into_dimensionality().unwrap();
                loss(&group_norm(&x, g1.view(), beta.view(), 2))
            },
            &gamma.clone().into_dyn(),
            1e-5,
        );
        assert_close(&dgamma.into_dyn(), &fdg, 1e-6, "gn dgamma");
        let fdb = fd_grad(
            |bp| {
                let b1: Array1<f64> = bp.clone().into_dimensionality().unwrap();
                loss(&group_norm(&x, gamma.view(), b1.view(), 2))
            },
            &beta.clone().into_dyn(),
            1e-5,
        );
        assert_close(&dbeta.into_dyn(), &fdb, 1e-6, "gn dbeta");
    }

    #[test]
    fn silu_and_linear_match_finite_differences() {
        let x = randn2((3, 4), 8);
        let ct = randn2((3, 4), 9);
        let loss = |y: &Array2<f64>| y.iter().zip(ct.iter()).map(|(a, b)| a * b).sum::<f64>();
        let dx = silu_bwd(&x, &ct);
        let fdx = fd_grad(
            |xp| {
                let x2: Array2<f64> = xp.clone().into_dimensionality().unwrap();
                loss(&silu(&x2))
            },
            &x.clone().into_dyn(),
            1e-6,
        );
        assert_close(&dx.into_dyn(), &fdx, 1e-6, "silu dx");

        let w = randn2((5, 4), 10);
        let b = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            Array1::from_shape_simple_fn(5, || f64::std_normal(&mut rng))
        };
        let ct = randn2((3, 5), 12);
        let loss = |y: &Array2<f64>| y.iter().zip(ct.iter()).map(|(a, b)| a * b).sum::<f64>();
        let (dx, dw, db) = linear_bwd(&x, w.view(), &ct);
        let fdx = fd_grad(
            |xp| {
                let x2: Array2<f64> = xp.clone().into_dimensionality().unwrap();
                loss(&linear(&x2, w.view(), b.view()))
            },
            &x.clone().into_dyn(),
            1e-6,
        );
        assert_close(&dx.into_dyn(), &fdx, 1e-6, "linear dx");
        let fdw = fd_grad(
            |wp| {
                let w2: Array2<f64> = wp.clone().into_dimensionality().unwrap();
                loss(&linear(&x, w2.view(), b.view()))
            },
            &w.clone().into_dyn(),
            1e-6,
        );
        assert_close(&dw.into_dyn(), &fdw, 1e-6, "linear dw");
        let fdb = fd_grad(
            |bp| {
                let b1: Array1<f64> = bp.clone().into_dimensionality().unwrap();
                loss(&linear(&x, w.view(), b1.view()))
            },
            &b.clone().into_dyn(),
            1e-6,
        );
        assert_close(&db.into_dyn(), &fdb, 1e-6, "linear db");
    }

    #[test]
    fn upsample_roundtrip_and_gradient() {
        let x = randn3((2, 3, 3), 13);
        let y = upsample_nearest2(&x);
        assert_eq!(y.dim(), (2, 6, 6));
        assert_eq!(y[(0, 0, 0)], x[(0, 0, 0)]);
        assert_eq!(y[(0, 5, 5)], x[(0, 2, 2)]);
        let ct = randn3((2, 6, 6), 14);
        let dx = upsample_nearest2_bwd(&ct);
        let fdx = fd_grad(
            |xp| {
                let x3: Array3<f64> = xp.clone().into_dimensionality().unwrap();
                upsample_nearest2(&x3)
                    .iter()
                    .zip(ct.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            },
            &x.clone().into_dyn(),
            1e-6,
        );
        assert_close(&dx.into_dyn(), &fdx, 1e-7, "upsample dx");
    }

    #[test]
    fn sinusoidal_embedding_basics() {
        let e0: Array1<f64> = sinusoidal_embedding(0, 8);
        for i in 0..4 {
            assert_eq!(e0[i], 0.0); // sin(0)
            assert_eq!(e0[4 + i], 1.0); // cos(0)
        }
        let e1: Array1<f64> = sinusoidal_embedding(5, 8);
        let e2: Array1<f64> = sinusoidal_embedding(5, 8);
        assert_eq!(e1, e2);
        let _ = ArrayD::<f64>::zeros(IxDyn(&[1])); // keep ArrayD import used
    }
}
