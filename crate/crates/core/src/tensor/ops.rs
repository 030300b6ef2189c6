//! Differentiable operations.
//!
//! Shapes follow the NCHW convention for image tensors. Batched matching ops
//! (`cosine_scores`, `softmax_rows`, `fuse`, `weighted_l1`,
//! `feature_match_l1`) reduce over the episode axis K in canonical order so
//! their values are bitwise invariant under conditional permutation.

use ndarray::{Array1, Array2, Array4, ArrayView3, Axis, Ix2, Ix3, Ix4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;

use super::tape::{BackOp, Tape, Var};
use super::{canonical_sum, scalar_tensor, Elem, TensorData};

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower one image (C,H,W) into a (C*kh*kw, Ho*Wo) patch matrix.
fn im2col(
    x: &ArrayView3<Elem>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<Elem> {
    let (c, h, w) = x.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut col = Array2::<Elem>::zeros((c * kh * kw, ho * wo));
    {
        let cs = col.as_slice_mut().expect("col is contiguous");
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ci);
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ci * kh + ki) * kw + kj) * (ho * wo);
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = row + oi * wo;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cs[base + oj] = plane[(ii as usize, jj as usize)];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the patch matrix gradient back onto an image gradient.
fn col2im(
    cols: &Array2<Elem>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<Elem> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut dx = ndarray::Array3::<Elem>::zeros((c, h, w));
    let cs = cols.as_slice().expect("cols is contiguous");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * (ho * wo);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = row + oi * wo;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[(ci, ii as usize, jj as usize)] += cs[base + oj];
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out = Arc::new(&*av + &*bv);
        let req = self.requires_grad(a) || self.requires_grad(b);
        let back = BackOp {
            run: Box::new(move |g| vec![(a.0, g.clone()), (b.0, g.clone())]),
        };
        self.push(out, req, Some(back))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, a: Var, c: Elem) -> Var {
        let av = self.value(a);
        let out = Arc::new(av.mapv(|v| v * c));
        let req = self.requires_grad(a);
        let back = BackOp {
            run: Box::new(move |g| vec![(a.0, g.mapv(|v| v * c))]),
        };
        self.push(out, req, Some(back))
    }

    /// Weighted sum of scalar terms: `Σ coeff_i · term_i`.
    pub fn sum_scaled(&self, terms: &[(Var, Elem)]) -> Var {
        let mut total = 0.0;
        for (v, c) in terms {
            total += c * super::scalar_of(&self.value(*v));
        }
        let parents: Vec<(usize, Elem)> = terms.iter().map(|(v, c)| (v.0, *c)).collect();
        let req = terms.iter().any(|(v, _)| self.requires_grad(*v));
        let back = BackOp {
            run: Box::new(move |g| {
                let gs = super::scalar_of(g);
                parents
                    .iter()
                    .map(|(p, c)| (*p, scalar_tensor(gs * c)))
                    .collect()
            }),
        };
        self.push(Arc::new(scalar_tensor(total)), req, Some(back))
    }

    /// `y = x · Wᵀ + b` with `x: (N,D)`, `w: (O,D)`, `b: (O)`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let x2 = xv.view().into_dimensionality::<Ix2>().expect("linear x rank");
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("linear w rank");
        assert_eq!(x2.ncols(), w2.ncols(), "linear in-features mismatch");
        let b1 = bv
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("linear b rank");
        assert_eq!(b1.len(), w2.nrows(), "linear bias length mismatch");
        let mut y = x2.dot(&w2.t());
        for mut row in y.rows_mut() {
            row += &b1;
        }
        let req = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let (xc, wc) = (Arc::clone(&xv), Arc::clone(&wv));
        let back = BackOp {
            run: Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let x2 = xc.view().into_dimensionality::<Ix2>().unwrap();
                let w2 = wc.view().into_dimensionality::<Ix2>().unwrap();
                let dx = g2.dot(&w2);
                let dw = g2.t().dot(&x2);
                let db = g2.sum_axis(Axis(0));
                vec![
                    (x.0, dx.into_dyn()),
                    (w.0, dw.into_dyn()),
                    (b.0, db.into_dyn()),
                ]
            }),
        };
        self.push(Arc::new(y.into_dyn()), req, Some(back))
    }

    /// 2-D convolution, `x: (N,C,H,W)`, `w: (O,C,kh,kw)`, `b: (O)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("conv x rank");
        let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv w rank");
        let (n, c, h, wd) = x4.dim();
        let (o, cw, kh, kw) = w4.dim();
        assert_eq!(c, cw, "conv channel mismatch: input {c}, weight {cw}");
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(wd, kw, stride, pad);
        let wmat: Array2<Elem> = w4
            .to_shape((o, cw * kh * kw))
            .expect("conv weight reshape")
            .to_owned();
        let b1 = bv
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("conv b rank");
        let mut y = Array4::<Elem>::zeros((n, o, ho, wo));
        for ni in 0..n {
            let col = im2col(&x4.index_axis(Axis(0), ni), kh, kw, stride, pad);
            let yn = wmat.dot(&col); // (O, Ho*Wo)
            let mut out_n = y.index_axis_mut(Axis(0), ni);
            for oi in 0..o {
                let src = yn.index_axis(Axis(0), oi);
                let mut dst = out_n.index_axis_mut(Axis(0), oi);
                let dst_flat = dst.as_slice_mut().unwrap();
                let bias = b1[oi];
                for (d, s) in dst_flat.iter_mut().zip(src.iter()) {
                    *d = s + bias;
                }
            }
        }
        let req = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let need_x = self.requires_grad(x);
        let xc = Arc::clone(&xv);
        let back = BackOp {
            run: Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = xc.view().into_dimensionality::<Ix4>().unwrap();
                let mut dw = Array2::<Elem>::zeros((o, c * kh * kw));
                let mut db = Array1::<Elem>::zeros(o);
                let mut dx = Array4::<Elem>::zeros((n, c, h, wd));
                for ni in 0..n {
                    let gn: Array2<Elem> = g4
                        .index_axis(Axis(0), ni)
                        .to_shape((o, ho * wo))
                        .unwrap()
                        .to_owned();
                    let col = im2col(&x4.index_axis(Axis(0), ni), kh, kw, stride, pad);
                    dw += &gn.dot(&col.t());
                    db += &gn.sum_axis(Axis(1));
                    if need_x {
                        let dcol = wmat.t().dot(&gn);
                        let dxn = col2im(&dcol, c, h, wd, kh, kw, stride, pad);
                        dx.index_axis_mut(Axis(0), ni).assign(&dxn);
                    }
                }
                let mut out = vec![
                    (w.0, dw.into_shape_with_order((o, c, kh, kw)).unwrap().into_dyn()),
                    (b.0, db.into_dyn()),
                ];
                if need_x {
                    out.push((x.0, dx.into_dyn()));
                }
                out
            }),
        };
        self.push(Arc::new(y.into_dyn()), req, Some(back))
    }

    pub fn leaky_relu(&self, x: Var, alpha: Elem) -> Var {
        let xv = self.value(x);
        let out = Arc::new(xv.mapv(|v| if v > 0.0 { v } else { alpha * v }));
        let req = self.requires_grad(x);
        let xc = Arc::clone(&xv);
        let back = BackOp {
            run: Box::new(move |g| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&*xc).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d *= alpha;
                    }
                });
                vec![(x.0, dx)]
            }),
        };
        self.push(out, req, Some(back))
    }

    pub fn relu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Arc::new(xv.mapv(|v| if v > 0.0 { v } else { 0.0 }));
        let req = self.requires_grad(x);
        let xc = Arc::clone(&xv);
        let back = BackOp {
            run: Box::new(move |g| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&*xc).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![(x.0, dx)]
            }),
        };
        self.push(out, req, Some(back))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Arc::new(xv.mapv(Elem::tanh));
        let req = self.requires_grad(x);
        let yc = Arc::clone(&out);
        let back = BackOp {
            run: Box::new(move |g| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&*yc).for_each(|d, &y| {
                    *d *= 1.0 - y * y;
                });
                vec![(x.0, dx)]
            }),
        };
        self.push(out, req, Some(back))
    }

    /// Batch normalization over (N,H,W) per channel, training mode.
    ///
    /// Returns the output plus the biased batch statistics so the caller can
    /// update running buffers.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: Elem,
    ) -> (Var, Array1<Elem>, Array1<Elem>) {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("bn x rank");
        let (n, c, h, w) = x4.dim();
        let m = (n * h * w) as Elem;
        let mut mean = Array1::<Elem>::zeros(c);
        let mut var = Array1::<Elem>::zeros(c);
        for ci in 0..c {
            let slice = x4.index_axis(Axis(1), ci);
            let mu = slice.iter().sum::<Elem>() / m;
            let vv = slice.iter().map(|&v| (v - mu) * (v - mu)).sum::<Elem>() / m;
            mean[ci] = mu;
            var[ci] = vv;
        }
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut xhat = Array4::<Elem>::zeros((n, c, h, w));
        let mut y = Array4::<Elem>::zeros((n, c, h, w));
        let mut invstd = Array1::<Elem>::zeros(c);
        for ci in 0..c {
            invstd[ci] = 1.0 / (var[ci] + eps).sqrt();
        }
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is, ga, be) = (mean[ci], invstd[ci], g1[ci], b1[ci]);
                let src = x4.index_axis(Axis(0), ni);
                let src = src.index_axis(Axis(0), ci);
                let mut xh = xhat.index_axis_mut(Axis(0), ni);
                let mut xh = xh.index_axis_mut(Axis(0), ci);
                let mut yo = y.index_axis_mut(Axis(0), ni);
                let mut yo = yo.index_axis_mut(Axis(0), ci);
                ndarray::Zip::from(&mut xh)
                    .and(&mut yo)
                    .and(&src)
                    .for_each(|xh, yo, &v| {
                        let nv = (v - mu) * is;
                        *xh = nv;
                        *yo = ga * nv + be;
                    });
            }
        }
        let req =
            self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let xhat = Arc::new(xhat.into_dyn());
        let xhc = Arc::clone(&xhat);
        let invstd_c = invstd.clone();
        let gc = Arc::clone(&gv);
        let back = BackOp {
            run: Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xh4 = xhc.view().into_dimensionality::<Ix4>().unwrap();
                let g1 = gc.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dgamma = Array1::<Elem>::zeros(c);
                let mut dbeta = Array1::<Elem>::zeros(c);
                for ci in 0..c {
                    let gy = g4.index_axis(Axis(1), ci);
                    let xh = xh4.index_axis(Axis(1), ci);
                    dbeta[ci] = gy.iter().sum();
                    dgamma[ci] = gy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                }
                let mut dx = Array4::<Elem>::zeros((n, c, h, w));
                for ci in 0..c {
                    let coef = g1[ci] * invstd_c[ci];
                    let mean_dy = dbeta[ci] / m;
                    let mean_dyxh = dgamma[ci] / m;
                    let gy = g4.index_axis(Axis(1), ci);
                    let xh = xh4.index_axis(Axis(1), ci);
                    let mut dxc = dx.index_axis_mut(Axis(1), ci);
                    ndarray::Zip::from(&mut dxc)
                        .and(&gy)
                        .and(&xh)
                        .for_each(|d, &dy, &nv| {
                            *d = coef * (dy - mean_dy - nv * mean_dyxh);
                        });
                }
                vec![
                    (x.0, dx.into_dyn()),
                    (gamma.0, dgamma.into_dyn()),
                    (beta.0, dbeta.into_dyn()),
                ]
            }),
        };
        let out = self.push(Arc::new(y.into_dyn()), req, Some(back));
        (out, mean, var)
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_infer(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<Elem>,
        running_var: &Array1<Elem>,
        eps: Elem,
    ) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("bn x rank");
        let (n, c, h, w) = x4.dim();
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut invstd = Array1::<Elem>::zeros(c);
        for ci in 0..c {
            invstd[ci] = 1.0 / (running_var[ci] + eps).sqrt();
        }
        let mut y = Array4::<Elem>::zeros((n, c, h, w));
        for ci in 0..c {
            let scale = g1[ci] * invstd[ci];
            let shift = b1[ci] - running_mean[ci] * scale;
            let src = x4.index_axis(Axis(1), ci);
            let mut dst = y.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &v| {
                *d = v * scale + shift;
            });
        }
        let req =
            self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let xc = Arc::clone(&xv);
        let rm = running_mean.clone();
        let scale_per_c: Array1<Elem> = (0..c).map(|ci| g1[ci] * invstd[ci]).collect();
        let invstd_c = invstd.clone();
        let back = BackOp {
            run: Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = xc.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<Elem>::zeros((n, c, h, w));
                let mut dgamma = Array1::<Elem>::zeros(c);
                let mut dbeta = Array1::<Elem>::zeros(c);
                for ci in 0..c {
                    let gy = g4.index_axis(Axis(1), ci);
                    let xs = x4.index_axis(Axis(1), ci);
                    let mut dxc = dx.index_axis_mut(Axis(1), ci);
                    let sc = scale_per_c[ci];
                    ndarray::Zip::from(&mut dxc).and(&gy).for_each(|d, &dy| {
                        *d = dy * sc;
                    });
                    dbeta[ci] = gy.iter().sum();
                    dgamma[ci] = gy
                        .iter()
                        .zip(xs.iter())
                        .map(|(dy, &v)| dy * (v - rm[ci]) * invstd_c[ci])
                        .sum();
                }
                vec![
                    (x.0, dx.into_dyn()),
                    (gamma.0, dgamma.into_dyn()),
                    (beta.0, dbeta.into_dyn()),
                ]
            }),
        };
        self.push(Arc::new(y.into_dyn()), req, Some(back))
    }

    /// Inverted dropout; the mask is drawn from `rng` in element order.
    pub fn dropout(&self, x: Var, rate: Elem, rng: &mut ChaCha20Rng) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if rate == 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<Elem> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() >= rate { inv } else { 0.0 })
            .collect();
        let mask = TensorData::from_shape_vec(xv.raw_dim(), mask).unwrap();
        let out = Arc::new(&*xv * &mask);
        let req = self.requires_grad(x);
        let back = BackOp {
            run: Box::new(move |g| vec![(x.0, g * &mask)]),
        };
        self.push(out, req, Some(back))
    }

    /// Nearest-neighbour 2x upsampling of (N,C,H,W).
    pub fn upsample_nearest2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("upsample rank");
        let (n, c, h, w) = x4.dim();
        let mut y = Array4::<Elem>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                let src = x4.index_axis(Axis(0), ni);
                let src = src.index_axis(Axis(0), ci);
                let mut dst = y.index_axis_mut(Axis(0), ni);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                for i in 0..h {
                    for j in 0..w {
                        let v = src[(i, j)];
                        dst[(2 * i, 2 * j)] = v;
                        dst[(2 * i, 2 * j + 1)] = v;
                        dst[(2 * i + 1, 2 * j)] = v;
                        dst[(2 * i + 1, 2 * j + 1)] = v;
                    }
                }
            }
        }
        let req = self.requires_grad(x);
        let back = BackOp {
            run: Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<Elem>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let src = g4.index_axis(Axis(0), ni);
                        let src = src.index_axis(Axis(0), ci);
                        let mut dst = dx.index_axis_mut(Axis(0), ni);
                        let mut dst = dst.index_axis_mut(Axis(0), ci);
                        for i in 0..h {
                            for j in 0..w {
                                dst[(i, j)] = src[(2 * i, 2 * j)]
                                    + src[(2 * i, 2 * j + 1)]
                                    + src[(2 * i + 1, 2 * j)]
                                    + src[(2 * i + 1, 2 * j + 1)];
                            }
                        }
                    }
                }
                vec![(x.0, dx.into_dyn())]
            }),
        };
        self.push(Arc::new(y.into_dyn()), req, Some(back))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("pool rank");
        let (n, c, h, w) = x4.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Array4::<Elem>::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                let src = x4.index_axis(Axis(0), ni);
                let src = src.index_axis(Axis(0), ci);
                let mut dst = y.index_axis_mut(Axis(0), ni);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                for i in 0..ho {
                    for j in 0..wo {
                        dst[(i, j)] = 0.25
                            * (src[(2 * i, 2 * j)]
                                + src[(2 * i, 2 * j + 1)]
                                + src[(2 * i + 1, 2 * j)]
                                + src[(2 * i + 1, 2 * j + 1)]);
                    }
                }
            }
        }
        let req = self.requires_grad(x);
        let back = BackOp {
            run: Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<Elem>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let src = g4.index_axis(Axis(0), ni);
                        let src = src.index_axis(Axis(0), ci);
                        let mut dst = dx.index_axis_mut(Axis(0), ni);
                        let mut dst = dst.index_axis_mut(Axis(0), ci);
                        for i in 0..ho {
                            for j in 0..wo {
                                let v = src[(i, j)] * 0.25;
                                dst[(2 * i, 2 * j)] = v;
                                dst[(2 * i, 2 * j + 1)] = v;
                                dst[(2 * i + 1, 2 * j)] = v;
                                dst[(2 * i + 1, 2 * j + 1)] = v;
                            }
                        }
                    }
                }
                vec![(x.0, dx.into_dyn())]
            }),
        };
        self.push(Arc::new(y.into_dyn()), req, Some(back))
    }

    /// Spatial global average pooling (N,C,H,W) -> (N,C).
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("gap rank");
        let (n, c, h, w) = x4.dim();
        let m = (h * w) as Elem;
        let mut y = Array2::<Elem>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let src = x4.index_axis(Axis(0), ni);
                let src = src.index_axis(Axis(0), ci);
                y[(ni, ci)] = src.iter().sum::<Elem>() / m;
            }
        }
        let req = self.requires_grad(x);
        let back = BackOp {
            run: Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array4::<Elem>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let v = g2[(ni, ci)] / m;
                        dx.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .fill(v);
                    }
                }
                vec![(x.0, dx.into_dyn())]
            }),
        };
        self.push(Arc::new(y.into_dyn()), req, Some(back))
    }

    /// Concatenate two (N,C,H,W) tensors along the channel axis.
    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a4 = av.view().into_dimensionality::<Ix4>().expect("concat a rank");
        let b4 = bv.view().into_dimensionality::<Ix4>().expect("concat b rank");
        let (n, ca, h, w) = a4.dim();
        let (nb, cb, hb, wb) = b4.dim();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let y = ndarray::concatenate(Axis(1), &[a4.view(), b4.view()]).unwrap();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let back = BackOp {
            run: Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let da = g4.slice(ndarray::s![.., 0..ca, .., ..]).to_owned();
                let db = g4.slice(ndarray::s![.., ca..ca + cb, .., ..]).to_owned();
                vec![(a.0, da.into_dyn()), (b.0, db.into_dyn())]
            }),
        };
        self.push(Arc::new(y.into_dyn()), req, Some(back))
    }

    /// Reshape without changing element order.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let old_shape: Vec<usize> = xv.shape().to_vec();
        let y = xv
            .to_shape(IxDyn(shape))
            .expect("reshape of contiguous tensor")
            .to_owned();
        let req = self.requires_grad(x);
        let back = BackOp {
            run: Box::new(move |g| {
                let dg = g.to_shape(IxDyn(&old_shape)).unwrap().to_owned();
                vec![(x.0, dg)]
            }),
        };
        self.push(Arc::new(y), req, Some(back))
    }

    /// Cosine similarity between one embedding per row and K embeddings per
    /// row: `z: (B,D)`, `c: (B,K,D)` -> `(B,K)`. Norms are floored at `eps`.
    pub fn cosine_scores(&self, z: Var, c: Var, eps: Elem) -> Var {
        let zv = self.value(z);
        let cv = self.value(c);
        let z2 = zv.view().into_dimensionality::<Ix2>().expect("cos z rank");
        let c3 = cv.view().into_dimensionality::<Ix3>().expect("cos c rank");
        let (bn, d) = z2.dim();
        let (bc, k, dc) = c3.dim();
        assert_eq!(bn, bc, "cosine batch mismatch");
        assert_eq!(d, dc, "cosine dim mismatch");
        let mut cos = Array2::<Elem>::zeros((bn, k));
        let mut zn = Array1::<Elem>::zeros(bn);
        let mut cn = Array2::<Elem>::zeros((bn, k));
        for b in 0..bn {
            let zr = z2.index_axis(Axis(0), b);
            zn[b] = zr.iter().map(|v| v * v).sum::<Elem>().sqrt().max(eps);
            for ki in 0..k {
                let cr = c3.index_axis(Axis(0), b);
                let cr = cr.index_axis(Axis(0), ki);
                let nrm = cr.iter().map(|v| v * v).sum::<Elem>().sqrt().max(eps);
                cn[(b, ki)] = nrm;
                let dot = zr.iter().zip(cr.iter()).map(|(a, b)| a * b).sum::<Elem>();
                cos[(b, ki)] = dot / (zn[b] * nrm);
            }
        }
        let req = self.requires_grad(z) || self.requires_grad(c);
        let (zc, cc) = (Arc::clone(&zv), Arc::clone(&cv));
        let cos_saved = cos.clone();
        let back = BackOp {
            run: Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let z2 = zc.view().into_dimensionality::<Ix2>().unwrap();
                let c3 = cc.view().into_dimensionality::<Ix3>().unwrap();
                let mut dz = Array2::<Elem>::zeros((bn, d));
                let mut dc = ndarray::Array3::<Elem>::zeros((bn, k, d));
                for b in 0..bn {
                    let zr = z2.index_axis(Axis(0), b);
                    let znorm = zn[b];
                    let z_at_floor = zr.iter().map(|v| v * v).sum::<Elem>().sqrt() < eps;
                    for ki in 0..k {
                        let gv = g2[(b, ki)];
                        if gv == 0.0 {
                            continue;
                        }
                        let cr = c3.index_axis(Axis(0), b);
                        let cr = cr.index_axis(Axis(0), ki);
                        let cnorm = cn[(b, ki)];
                        let c_at_floor =
                            cr.iter().map(|v| v * v).sum::<Elem>().sqrt() < eps;
                        let cosv = cos_saved[(b, ki)];
                        for di in 0..d {
                            // d cos / dz = c/(|z||c|) - cos * z/|z|^2 (norm term
                            // vanishes when the norm sits at the floor).
                            let mut gz = cr[di] / (znorm * cnorm);
                            if !z_at_floor {
                                gz -= cosv * zr[di] / (znorm * znorm);
                            }
                            dz[(b, di)] += gv * gz;
                            let mut gc = zr[di] / (znorm * cnorm);
                            if !c_at_floor {
                                gc -= cosv * cr[di] / (cnorm * cnorm);
                            }
                            dc[(b, ki, di)] += gv * gc;
                        }
                    }
                }
                vec![(z.0, dz.into_dyn()), (c.0, dc.into_dyn())]
            }),
        };
        self.push(Arc::new(cos.into_dyn()), req, Some(back))
    }

    /// Row-wise softmax of (B,K). The normalizer is summed canonically so the
    /// output is bitwise permutation-equivariant.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x2 = xv.view().into_dimensionality::<Ix2>().expect("softmax rank");
        let (b, k) = x2.dim();
        let mut p = Array2::<Elem>::zeros((b, k));
        for bi in 0..b {
            let row = x2.index_axis(Axis(0), bi);
            let m = row.iter().fold(Elem::NEG_INFINITY, |a, &v| a.max(v));
            let mut exps: Vec<Elem> = row.iter().map(|&v| (v - m).exp()).collect();
            let mut sorted = exps.clone();
            let denom = canonical_sum(&mut sorted);
            for (ki, e) in exps.drain(..).enumerate() {
                p[(bi, ki)] = e / denom;
            }
        }
        let req = self.requires_grad(x);
        let pc = p.clone();
        let back = BackOp {
            run: Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<Elem>::zeros((b, k));
                for bi in 0..b {
                    let dot: Elem = (0..k).map(|ki| g2[(bi, ki)] * pc[(bi, ki)]).sum();
                    for ki in 0..k {
                        dx[(bi, ki)] = pc[(bi, ki)] * (g2[(bi, ki)] - dot);
                    }
                }
                vec![(x.0, dx.into_dyn())]
            }),
        };
        self.push(Arc::new(p.into_dyn()), req, Some(back))
    }

    /// Convex combination over the episode axis:
    /// `scores: (B,K)`, `feats: (B,K,rest…)` -> `(B,rest…)`.
    ///
    /// Per output element the K products are summed canonically, making the
    /// result bitwise invariant under simultaneous permutation of scores and
    /// features.
    pub fn fuse(&self, scores: Var, feats: Var) -> Var {
        let sv = self.value(scores);
        let fv = self.value(feats);
        let s2 = sv.view().into_dimensionality::<Ix2>().expect("fuse scores rank");
        let (b, k) = s2.dim();
        let fshape = fv.shape().to_vec();
        assert!(fshape.len() >= 2 && fshape[0] == b && fshape[1] == k, "fuse shape mismatch");
        let rest: Vec<usize> = fshape[2..].to_vec();
        let m: usize = rest.iter().product();
        let f3 = fv.to_shape((b, k, m)).expect("fuse feats reshape").to_owned();
        let mut out = Array2::<Elem>::zeros((b, m));
        let mut buf = vec![0.0; k];
        for bi in 0..b {
            for mi in 0..m {
                for ki in 0..k {
                    buf[ki] = s2[(bi, ki)] * f3[(bi, ki, mi)];
                }
                out[(bi, mi)] = canonical_sum(&mut buf);
            }
        }
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&rest);
        let out = out.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let req = self.requires_grad(scores) || self.requires_grad(feats);
        let sc = s2.to_owned();
        let f3c = f3.clone();
        let back = BackOp {
            run: Box::new(move |g| {
                let g2 = g.to_shape((b, m)).unwrap().to_owned();
                let mut ds = Array2::<Elem>::zeros((b, k));
                let mut df = ndarray::Array3::<Elem>::zeros((b, k, m));
                for bi in 0..b {
                    for ki in 0..k {
                        let a = sc[(bi, ki)];
                        let mut acc = 0.0;
                        for mi in 0..m {
                            let gv = g2[(bi, mi)];
                            df[(bi, ki, mi)] = a * gv;
                            acc += gv * f3c[(bi, ki, mi)];
                        }
                        ds[(bi, ki)] = acc;
                    }
                }
                let mut fshape_full = vec![b, k];
                fshape_full.extend_from_slice(&rest);
                vec![
                    (scores.0, ds.into_dyn()),
                    (
                        feats.0,
                        df.into_shape_with_order(IxDyn(&fshape_full)).unwrap(),
                    ),
                ]
            }),
        };
        self.push(Arc::new(out), req, Some(back))
    }

    /// Weighted reconstruction loss:
    /// `Σ_b (1/B) Σ_k a_bk · meanAbs(x_bk − g_b)` with `targets` constant.
    ///
    /// `scores: (B,K)`, `targets: (B,K,C,H,W)` (plain data), `gen: (B,C,H,W)`.
    pub fn weighted_l1(&self, scores: Var, targets: &TensorData, gen: Var) -> Var {
        let sv = self.value(scores);
        let gv = self.value(gen);
        let s2 = sv.view().into_dimensionality::<Ix2>().expect("wl1 scores rank");
        let (b, k) = s2.dim();
        let m: usize = gv.len() / b;
        assert_eq!(
            targets.len(),
            b * k * m,
            "weighted_l1 target shape mismatch"
        );
        let t3 = targets.to_shape((b, k, m)).unwrap().to_owned();
        let g2 = gv.to_shape((b, m)).unwrap().to_owned();
        let mut dists = Array2::<Elem>::zeros((b, k));
        for bi in 0..b {
            for ki in 0..k {
                let mut acc = 0.0;
                for mi in 0..m {
                    acc += (t3[(bi, ki, mi)] - g2[(bi, mi)]).abs();
                }
                dists[(bi, ki)] = acc / m as Elem;
            }
        }
        let mut total = 0.0;
        let mut buf = vec![0.0; k];
        for bi in 0..b {
            for ki in 0..k {
                buf[ki] = s2[(bi, ki)] * dists[(bi, ki)];
            }
            total += canonical_sum(&mut buf);
        }
        total /= b as Elem;
        let req = self.requires_grad(scores) || self.requires_grad(gen);
        let sc = s2.to_owned();
        let gen_shape = gv.shape().to_vec();
        let dists_c = dists.clone();
        let back = BackOp {
            run: Box::new(move |g| {
                let gs = super::scalar_of(g);
                let bn = b as Elem;
                let mut ds = Array2::<Elem>::zeros((b, k));
                for bi in 0..b {
                    for ki in 0..k {
                        ds[(bi, ki)] = gs * dists_c[(bi, ki)] / bn;
                    }
                }
                let mut dg = Array2::<Elem>::zeros((b, m));
                for bi in 0..b {
                    for ki in 0..k {
                        let w = gs * sc[(bi, ki)] / (bn * m as Elem);
                        for mi in 0..m {
                            let diff = g2[(bi, mi)] - t3[(bi, ki, mi)];
                            dg[(bi, mi)] += w * diff.signum_or_zero();
                        }
                    }
                }
                vec![
                    (scores.0, ds.into_dyn()),
                    (
                        gen.0,
                        dg.into_shape_with_order(IxDyn(&gen_shape)).unwrap(),
                    ),
                ]
            }),
        };
        self.push(Arc::new(scalar_tensor(total)), req, Some(back))
    }

    /// Feature matching loss:
    /// `mean_b meanAbs(Σ_k a_bk D̂(x_bk) − D̂(x̃_b))`.
    ///
    /// `scores: (B,K)`, `cond_feats: (B,K,F)`, `fake_feats: (B,F)`.
    pub fn feature_match_l1(&self, scores: Var, cond_feats: Var, fake_feats: Var) -> Var {
        let sv = self.value(scores);
        let cv = self.value(cond_feats);
        let fv = self.value(fake_feats);
        let s2 = sv.view().into_dimensionality::<Ix2>().expect("fm scores rank");
        let c3 = cv.view().into_dimensionality::<Ix3>().expect("fm cond rank");
        let f2 = fv.view().into_dimensionality::<Ix2>().expect("fm fake rank");
        let (b, k) = s2.dim();
        let (bc, kc, fdim) = c3.dim();
        assert_eq!((b, k), (bc, kc), "fm episode shape mismatch");
        assert_eq!(f2.dim(), (b, fdim), "fm fake shape mismatch");
        let mut fused = Array2::<Elem>::zeros((b, fdim));
        let mut buf = vec![0.0; k];
        for bi in 0..b {
            for fi in 0..fdim {
                for ki in 0..k {
                    buf[ki] = s2[(bi, ki)] * c3[(bi, ki, fi)];
                }
                fused[(bi, fi)] = canonical_sum(&mut buf);
            }
        }
        let mut total = 0.0;
        for bi in 0..b {
            let mut acc = 0.0;
            for fi in 0..fdim {
                acc += (fused[(bi, fi)] - f2[(bi, fi)]).abs();
            }
            total += acc / fdim as Elem;
        }
        total /= b as Elem;
        let req = self.requires_grad(scores)
            || self.requires_grad(cond_feats)
            || self.requires_grad(fake_feats);
        let need_cond = self.requires_grad(cond_feats);
        let sc = s2.to_owned();
        let c3c = c3.to_owned();
        let f2c = f2.to_owned();
        let fused_c = fused.clone();
        let back = BackOp {
            run: Box::new(move |g| {
                let gs = super::scalar_of(g);
                let norm = gs / (b as Elem * fdim as Elem);
                let mut ds = Array2::<Elem>::zeros((b, k));
                let mut dfake = Array2::<Elem>::zeros((b, fdim));
                let mut dcond = ndarray::Array3::<Elem>::zeros((b, k, fdim));
                for bi in 0..b {
                    for fi in 0..fdim {
                        let s = (fused_c[(bi, fi)] - f2c[(bi, fi)]).signum_or_zero();
                        if s == 0.0 {
                            continue;
                        }
                        dfake[(bi, fi)] = -s * norm;
                        for ki in 0..k {
                            ds[(bi, ki)] += s * norm * c3c[(bi, ki, fi)];
                            if need_cond {
                                dcond[(bi, ki, fi)] = s * norm * sc[(bi, ki)];
                            }
                        }
                    }
                }
                let mut out = vec![
                    (scores.0, ds.into_dyn()),
                    (fake_feats.0, dfake.into_dyn()),
                ];
                if need_cond {
                    out.push((cond_feats.0, dcond.into_dyn()));
                }
                out
            }),
        };
        self.push(Arc::new(scalar_tensor(total)), req, Some(back))
    }

    /// Discriminator hinge loss:
    /// `mean(max(0, 1 + fake)) + mean(max(0, 1 − real))`.
    pub fn hinge_d(&self, fake: Var, real: Var) -> Var {
        let fv = self.value(fake);
        let rv = self.value(real);
        assert!(fv.len() > 0 && rv.len() > 0, "hinge_d on empty scores");
        let nf = fv.len() as Elem;
        let nr = rv.len() as Elem;
        let lf: Elem = fv.iter().map(|&v| (1.0 + v).max(0.0)).sum::<Elem>() / nf;
        let lr: Elem = rv.iter().map(|&v| (1.0 - v).max(0.0)).sum::<Elem>() / nr;
        let req = self.requires_grad(fake) || self.requires_grad(real);
        let (fc, rc) = (Arc::clone(&fv), Arc::clone(&rv));
        let back = BackOp {
            run: Box::new(move |g| {
                let gs = super::scalar_of(g);
                let df = fc.mapv(|v| if 1.0 + v > 0.0 { gs / nf } else { 0.0 });
                let dr = rc.mapv(|v| if 1.0 - v > 0.0 { -gs / nr } else { 0.0 });
                vec![(fake.0, df), (real.0, dr)]
            }),
        };
        self.push(Arc::new(scalar_tensor(lf + lr)), req, Some(back))
    }

    /// Generator adversarial loss: `−mean(fake)`.
    pub fn neg_mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.len() > 0, "neg_mean on empty tensor");
        let n = xv.len() as Elem;
        let v = -xv.iter().sum::<Elem>() / n;
        let req = self.requires_grad(x);
        let shape = xv.raw_dim();
        let back = BackOp {
            run: Box::new(move |g| {
                let gs = super::scalar_of(g);
                vec![(x.0, TensorData::from_elem(shape.clone(), -gs / n))]
            }),
        };
        self.push(Arc::new(scalar_tensor(v)), req, Some(back))
    }

    /// Mean softmax cross-entropy of `(N,C)` logits against class indices.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let l2 = lv.view().into_dimensionality::<Ix2>().expect("ce rank");
        let (n, c) = l2.dim();
        assert_eq!(labels.len(), n, "cross_entropy label count mismatch");
        assert!(labels.iter().all(|&l| l < c), "label out of range");
        let mut probs = Array2::<Elem>::zeros((n, c));
        let mut total = 0.0;
        for i in 0..n {
            let row = l2.index_axis(Axis(0), i);
            let m = row.iter().fold(Elem::NEG_INFINITY, |a, &v| a.max(v));
            let mut denom = 0.0;
            for &v in row.iter() {
                denom += (v - m).exp();
            }
            let lse = m + denom.ln();
            total += lse - row[labels[i]];
            for ci in 0..c {
                probs[(i, ci)] = (row[ci] - lse).exp();
            }
        }
        total /= n as Elem;
        let req = self.requires_grad(logits);
        let labels_c = labels.to_vec();
        let back = BackOp {
            run: Box::new(move |g| {
                let gs = super::scalar_of(g);
                let mut dl = probs.clone();
                for (i, &lab) in labels_c.iter().enumerate() {
                    dl[(i, lab)] -= 1.0;
                }
                dl.mapv_inplace(|v| v * gs / n as Elem);
                vec![(logits.0, dl.into_dyn())]
            }),
        };
        self.push(Arc::new(scalar_tensor(total)), req, Some(back))
    }

    /// Mean of all elements (monitoring/aggregation).
    pub fn mean_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len() as Elem;
        let v = xv.iter().sum::<Elem>() / n;
        let req = self.requires_grad(x);
        let shape = xv.raw_dim();
        let back = BackOp {
            run: Box::new(move |g| {
                let gs = super::scalar_of(g);
                vec![(x.0, TensorData::from_elem(shape.clone(), gs / n))]
            }),
        };
        self.push(Arc::new(scalar_tensor(v)), req, Some(back))
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Elem;
}

impl SignumOrZero for Elem {
    /// L1 subgradient convention: zero at the kink.
    fn signum_or_zero(self) -> Elem {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
