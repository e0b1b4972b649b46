//! Matrix products and small-image convolutions.
//!
//! Convolutions are lowered to GEMM through im2col. Inputs carry no batch
//! axis; the models here process one view at a time.

use ndarray::{Array2, Array3, Array4, ArrayD, Ix2, Ix3, Ix4, Ix5};

use crate::graph::Tensor;

impl Tensor {
    /// `(M,K) x (K,N) -> (M,N)`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let a = self
            .value()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let b = other
            .value()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension mismatch");
        let value = a.dot(&b).into_dyn();
        self.graph.custom(
            &[self, other],
            value,
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let da = g2.dot(&b.t()).into_dyn();
                let db = a.t().dot(&g2).into_dyn();
                vec![Some(da), Some(db)]
            }),
        )
    }
}

fn conv2d_out_len(n: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let span = dilation * (k - 1) + 1;
    assert!(n + 2 * pad >= span, "kernel does not fit input");
    (n + 2 * pad - span) / stride + 1
}

/// ndarray's `dot` can return non-standard layouts for degenerate inner
/// dimensions; force C order before reshaping.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn im2col2d(
    x: &Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv2d_out_len(h, kh, stride, pad, dilation);
    let wo = conv2d_out_len(w, kw, stride, pad, dilation);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki * dilation) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj * dilation) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im2d(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array3<f64> {
    let ho = conv2d_out_len(h, kh, stride, pad, dilation);
    let wo = conv2d_out_len(w, kw, stride, pad, dilation);
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki * dilation) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj * dilation) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[[ci, ii as usize, jj as usize]] += dcols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    dx
}

/// 2-d convolution: `x (Cin,H,W)` with `w (Cout,Cin,kh,kw)`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize, dilation: usize) -> Tensor {
    x.same_graph(w);
    let xv = x
        .value()
        .into_dimensionality::<Ix3>()
        .expect("conv2d input must be (C,H,W)");
    let wv = w
        .value()
        .into_dimensionality::<Ix4>()
        .expect("conv2d weight must be (Cout,Cin,kh,kw)");
    let (cin, h, wd) = xv.dim();
    let (cout, wcin, kh, kw) = wv.dim();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let ho = conv2d_out_len(h, kh, stride, pad, dilation);
    let wo = conv2d_out_len(wd, kw, stride, pad, dilation);

    let cols = im2col2d(&xv, kh, kw, stride, pad, dilation);
    let wmat = wv
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap()
        .to_owned();
    let out = standard(wmat.dot(&cols));
    let value: ArrayD<f64> = out.into_shape_with_order((cout, ho, wo)).unwrap().into_dyn();

    x.graph().custom(
        &[x, w],
        value,
        Box::new(move |g| {
            let gmat = g
                .as_standard_layout()
                .into_shape_with_order((cout, ho * wo))
                .unwrap()
                .to_owned();
            let cols = im2col2d(&xv, kh, kw, stride, pad, dilation);
            let dw = standard(gmat.dot(&cols.t()))
                .into_shape_with_order((cout, cin, kh, kw))
                .unwrap()
                .into_dyn();
            let dcols = wmat.t().dot(&gmat);
            let dx = col2im2d(&dcols, cin, h, wd, kh, kw, stride, pad, dilation).into_dyn();
            vec![Some(dx), Some(dw)]
        }),
    )
}

fn im2col3d(x: &Array4<f64>, k: usize, pad: usize, dilation: usize) -> Array2<f64> {
    let (c, d, h, w) = x.dim();
    let do_ = conv2d_out_len(d, k, 1, pad, dilation);
    let ho = conv2d_out_len(h, k, 1, pad, dilation);
    let wo = conv2d_out_len(w, k, 1, pad, dilation);
    let mut cols = Array2::<f64>::zeros((c * k * k * k, do_ * ho * wo));
    for ci in 0..c {
        for kd in 0..k {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + kd) * k + ki) * k + kj;
                    for od in 0..do_ {
                        let dd = (od + kd * dilation) as isize - pad as isize;
                        if dd < 0 || dd >= d as isize {
                            continue;
                        }
                        for oi in 0..ho {
                            let ii = (oi + ki * dilation) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for oj in 0..wo {
                                let jj = (oj + kj * dilation) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                cols[[row, (od * ho + oi) * wo + oj]] =
                                    x[[ci, dd as usize, ii as usize, jj as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3d(
    dcols: &Array2<f64>,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    dilation: usize,
) -> Array4<f64> {
    let do_ = conv2d_out_len(d, k, 1, pad, dilation);
    let ho = conv2d_out_len(h, k, 1, pad, dilation);
    let wo = conv2d_out_len(w, k, 1, pad, dilation);
    let mut dx = Array4::<f64>::zeros((c, d, h, w));
    for ci in 0..c {
        for kd in 0..k {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + kd) * k + ki) * k + kj;
                    for od in 0..do_ {
                        let dd = (od + kd * dilation) as isize - pad as isize;
                        if dd < 0 || dd >= d as isize {
                            continue;
                        }
                        for oi in 0..ho {
                            let ii = (oi + ki * dilation) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for oj in 0..wo {
                                let jj = (oj + kj * dilation) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                dx[[ci, dd as usize, ii as usize, jj as usize]] +=
                                    dcols[[row, (od * ho + oi) * wo + oj]];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 3-d convolution, stride 1: `x (C,D,H,W)` with `w (Cout,Cin,k,k,k)`.
pub fn conv3d(x: &Tensor, w: &Tensor, pad: usize, dilation: usize) -> Tensor {
    x.same_graph(w);
    let xv = x
        .value()
        .into_dimensionality::<Ix4>()
        .expect("conv3d input must be (C,D,H,W)");
    let wv = w
        .value()
        .into_dimensionality::<Ix5>()
        .expect("conv3d weight must be (Cout,Cin,k,k,k)");
    let (cin, d, h, wd) = xv.dim();
    let (cout, wcin, k, k2, k3) = wv.dim();
    assert_eq!(cin, wcin, "conv3d channel mismatch");
    assert!(k == k2 && k == k3, "conv3d kernel must be cubic");
    let do_ = conv2d_out_len(d, k, 1, pad, dilation);
    let ho = conv2d_out_len(h, k, 1, pad, dilation);
    let wo = conv2d_out_len(wd, k, 1, pad, dilation);

    let cols = im2col3d(&xv, k, pad, dilation);
    let wmat = wv
        .view()
        .into_shape_with_order((cout, cin * k * k * k))
        .unwrap()
        .to_owned();
    let out = standard(wmat.dot(&cols));
    let value: ArrayD<f64> = out
        .into_shape_with_order((cout, do_, ho, wo))
        .unwrap()
        .into_dyn();

    x.graph().custom(
        &[x, w],
        value,
        Box::new(move |g| {
            let gmat = g
                .as_standard_layout()
                .into_shape_with_order((cout, do_ * ho * wo))
                .unwrap()
                .to_owned();
            let cols = im2col3d(&xv, k, pad, dilation);
            let dw = standard(gmat.dot(&cols.t()))
                .into_shape_with_order((cout, cin, k, k, k))
                .unwrap()
                .into_dyn();
            let dcols = wmat.t().dot(&gmat);
            let dx = col2im3d(&dcols, cin, d, h, wd, k, pad, dilation).into_dyn();
            vec![Some(dx), Some(dw)]
        }),
    )
}
