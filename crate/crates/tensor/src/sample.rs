//! Differentiable gather/scatter and interpolation primitives.
//!
//! Sample points are plain arrays (geometry is data, not a differentiable
//! quantity here); gradients flow to the sampled maps and volumes. The
//! exception is [`splat_linear`], whose bin positions do carry gradient,
//! which is what lets depth estimates train through a rendered volume.

use ndarray::{Array2, ArrayD, Ix2, Ix3, Ix4, IxDyn};

use crate::graph::Tensor;

/// Bilinear sampling on `map (C,H,W)` at `pts (N,2)` given as `(x, y)` in
/// grid-node coordinates (x indexes columns, y rows; `(0,0)` is the first
/// node). Coordinates are clamped to the border.
pub fn bilinear_sample2d(map: &Tensor, pts: &Array2<f64>) -> Tensor {
    let mv = map
        .value()
        .into_dimensionality::<Ix3>()
        .expect("bilinear_sample2d map must be (C,H,W)");
    let (c, h, w) = mv.dim();
    assert_eq!(pts.ncols(), 2, "points must be (N,2)");
    let n = pts.nrows();

    // (i0, j0, wy, wx) per point, with clamped corner indices.
    let mut taps = Vec::with_capacity(n);
    for p in 0..n {
        let x = pts[[p, 0]].clamp(0.0, (w - 1) as f64);
        let y = pts[[p, 1]].clamp(0.0, (h - 1) as f64);
        let j0 = x.floor() as usize;
        let i0 = y.floor() as usize;
        let j1 = (j0 + 1).min(w - 1);
        let i1 = (i0 + 1).min(h - 1);
        taps.push((i0, i1, j0, j1, y - i0 as f64, x - j0 as f64));
    }

    let mut out = Array2::<f64>::zeros((c, n));
    for (p, &(i0, i1, j0, j1, wy, wx)) in taps.iter().enumerate() {
        for ci in 0..c {
            let v00 = mv[[ci, i0, j0]];
            let v01 = mv[[ci, i0, j1]];
            let v10 = mv[[ci, i1, j0]];
            let v11 = mv[[ci, i1, j1]];
            out[[ci, p]] = v00 * (1.0 - wy) * (1.0 - wx)
                + v01 * (1.0 - wy) * wx
                + v10 * wy * (1.0 - wx)
                + v11 * wy * wx;
        }
    }

    map.graph().custom(
        &[map],
        out.into_dyn(),
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dm = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            for (p, &(i0, i1, j0, j1, wy, wx)) in taps.iter().enumerate() {
                for ci in 0..c {
                    let gv = g2[[ci, p]];
                    dm[[ci, i0, j0]] += gv * (1.0 - wy) * (1.0 - wx);
                    dm[[ci, i0, j1]] += gv * (1.0 - wy) * wx;
                    dm[[ci, i1, j0]] += gv * wy * (1.0 - wx);
                    dm[[ci, i1, j1]] += gv * wy * wx;
                }
            }
            vec![Some(dm)]
        }),
    )
}

/// Trilinear sampling on `vol (C,A,B,D)` at `pts (N,3)` in cell-index
/// coordinates ordered like the volume axes `(a, b, d)`. Border-clamped.
pub fn trilinear_sample3d(vol: &Tensor, pts: &Array2<f64>) -> Tensor {
    let vv = vol
        .value()
        .into_dimensionality::<Ix4>()
        .expect("trilinear_sample3d volume must be (C,A,B,D)");
    let (c, na, nb, nd) = vv.dim();
    assert_eq!(pts.ncols(), 3, "points must be (N,3)");
    let n = pts.nrows();

    let mut taps = Vec::with_capacity(n);
    for p in 0..n {
        let a = pts[[p, 0]].clamp(0.0, (na - 1) as f64);
        let b = pts[[p, 1]].clamp(0.0, (nb - 1) as f64);
        let d = pts[[p, 2]].clamp(0.0, (nd - 1) as f64);
        let a0 = a.floor() as usize;
        let b0 = b.floor() as usize;
        let d0 = d.floor() as usize;
        let a1 = (a0 + 1).min(na - 1);
        let b1 = (b0 + 1).min(nb - 1);
        let d1 = (d0 + 1).min(nd - 1);
        taps.push((
            [a0, a1],
            [b0, b1],
            [d0, d1],
            a - a0 as f64,
            b - b0 as f64,
            d - d0 as f64,
        ));
    }

    let mut out = Array2::<f64>::zeros((c, n));
    for (p, (ai, bi, di, wa, wb, wd)) in taps.iter().enumerate() {
        for ci in 0..c {
            let mut acc = 0.0;
            for (ia, fa) in [(0usize, 1.0 - wa), (1, *wa)] {
                for (ib, fb) in [(0usize, 1.0 - wb), (1, *wb)] {
                    for (id, fd) in [(0usize, 1.0 - wd), (1, *wd)] {
                        acc += vv[[ci, ai[ia], bi[ib], di[id]]] * fa * fb * fd;
                    }
                }
            }
            out[[ci, p]] = acc;
        }
    }

    vol.graph().custom(
        &[vol],
        out.into_dyn(),
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dv = ArrayD::<f64>::zeros(IxDyn(&[c, na, nb, nd]));
            for (p, (ai, bi, di, wa, wb, wd)) in taps.iter().enumerate() {
                for ci in 0..c {
                    let gv = g2[[ci, p]];
                    for (ia, fa) in [(0usize, 1.0 - wa), (1, *wa)] {
                        for (ib, fb) in [(0usize, 1.0 - wb), (1, *wb)] {
                            for (id, fd) in [(0usize, 1.0 - wd), (1, *wd)] {
                                dv[[ci, ai[ia], bi[ib], di[id]]] += gv * fa * fb * fd;
                            }
                        }
                    }
                }
            }
            vec![Some(dv)]
        }),
    )
}

/// Gather elements of a 1-d tensor: `out[i] = x[idx[i]]`.
pub fn gather1d(x: &Tensor, idx: &[usize]) -> Tensor {
    let xv = x.value();
    assert_eq!(xv.ndim(), 1, "gather1d input must be 1-d");
    let n = xv.len();
    let idx: Vec<usize> = idx.to_vec();
    for &i in &idx {
        assert!(i < n, "gather1d index {i} out of range {n}");
    }
    let out: Vec<f64> = idx.iter().map(|&i| xv[[i]]).collect();
    let m = out.len();
    x.graph().custom(
        &[x],
        ArrayD::from_shape_vec(IxDyn(&[m]), out).unwrap(),
        Box::new(move |g| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[n]));
            for (k, &i) in idx.iter().enumerate() {
                dx[[i]] += g[[k]];
            }
            vec![Some(dx)]
        }),
    )
}

/// Per-row column selection on `x (N,C)`: `out[i] = x[i, idx[i]]`.
pub fn gather_cols_per_row(x: &Tensor, idx: &[usize]) -> Tensor {
    let xv = x
        .value()
        .into_dimensionality::<Ix2>()
        .expect("gather_cols_per_row input must be (N,C)");
    let (n, c) = xv.dim();
    assert_eq!(idx.len(), n, "one index per row required");
    let idx: Vec<usize> = idx.to_vec();
    for &j in &idx {
        assert!(j < c, "column index {j} out of range {c}");
    }
    let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xv[[i, j]]).collect();
    x.graph().custom(
        &[x],
        ArrayD::from_shape_vec(IxDyn(&[n]), out).unwrap(),
        Box::new(move |g| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[n, c]));
            for (i, &j) in idx.iter().enumerate() {
                dx[[i, j]] += g[[i]];
            }
            vec![Some(dx)]
        }),
    )
}

/// Mean-pool rows of `feats (N,C)` into `n_cells` buckets. `cells[i]` is the
/// bucket of row `i`, or negative to drop the row. Returns the pooled
/// `(n_cells, C)` tensor (zero rows for empty buckets) and the bucket counts.
pub fn scatter_mean(feats: &Tensor, cells: &[isize], n_cells: usize) -> (Tensor, Vec<usize>) {
    let fv = feats
        .value()
        .into_dimensionality::<Ix2>()
        .expect("scatter_mean input must be (N,C)");
    let (n, c) = fv.dim();
    assert_eq!(cells.len(), n, "one cell per row required");
    let cells: Vec<isize> = cells.to_vec();
    let mut counts = vec![0usize; n_cells];
    for &cell in &cells {
        if cell >= 0 {
            let cell = cell as usize;
            assert!(cell < n_cells, "cell {cell} out of range {n_cells}");
            counts[cell] += 1;
        }
    }
    let mut out = Array2::<f64>::zeros((n_cells, c));
    for (i, &cell) in cells.iter().enumerate() {
        if cell < 0 {
            continue;
        }
        let cell = cell as usize;
        let inv = 1.0 / counts[cell] as f64;
        for j in 0..c {
            out[[cell, j]] += fv[[i, j]] * inv;
        }
    }
    let counts_back = counts.clone();
    let t = feats.graph().custom(
        &[feats],
        out.into_dyn(),
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut df = ArrayD::<f64>::zeros(IxDyn(&[n, c]));
            for (i, &cell) in cells.iter().enumerate() {
                if cell < 0 {
                    continue;
                }
                let cell = cell as usize;
                let inv = 1.0 / counts_back[cell] as f64;
                for j in 0..c {
                    df[[i, j]] += g2[[cell, j]] * inv;
                }
            }
            vec![Some(df)]
        }),
    );
    (t, counts)
}

/// Linear splat of `scores (K,P)` at fractional bin positions `pos (K,P)`
/// into `out (n_bins, P)`. Each entry deposits into the two neighbouring
/// integer bins with linear weights; contributions outside `[0, n_bins)`
/// are dropped. Gradients flow to both scores and positions.
pub fn splat_linear(scores: &Tensor, pos: &Tensor, n_bins: usize) -> Tensor {
    scores.same_graph(pos);
    let sv = scores
        .value()
        .into_dimensionality::<Ix2>()
        .expect("splat_linear scores must be (K,P)");
    let pv = pos
        .value()
        .into_dimensionality::<Ix2>()
        .expect("splat_linear positions must be (K,P)");
    assert_eq!(sv.dim(), pv.dim(), "scores and positions must match");
    let (k, p) = sv.dim();

    let mut out = Array2::<f64>::zeros((n_bins, p));
    for ki in 0..k {
        for pi in 0..p {
            let x = pv[[ki, pi]];
            let i0 = x.floor();
            let w1 = x - i0;
            let i0 = i0 as isize;
            let s = sv[[ki, pi]];
            if i0 >= 0 && (i0 as usize) < n_bins {
                out[[i0 as usize, pi]] += s * (1.0 - w1);
            }
            let i1 = i0 + 1;
            if i1 >= 0 && (i1 as usize) < n_bins {
                out[[i1 as usize, pi]] += s * w1;
            }
        }
    }

    scores.graph().custom(
        &[scores, pos],
        out.into_dyn(),
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut ds = ArrayD::<f64>::zeros(IxDyn(&[k, p]));
            let mut dp = ArrayD::<f64>::zeros(IxDyn(&[k, p]));
            for ki in 0..k {
                for pi in 0..p {
                    let x = pv[[ki, pi]];
                    let i0f = x.floor();
                    let w1 = x - i0f;
                    let i0 = i0f as isize;
                    let i1 = i0 + 1;
                    let s = sv[[ki, pi]];
                    let g0 = if i0 >= 0 && (i0 as usize) < n_bins {
                        g2[[i0 as usize, pi]]
                    } else {
                        0.0
                    };
                    let g1 = if i1 >= 0 && (i1 as usize) < n_bins {
                        g2[[i1 as usize, pi]]
                    } else {
                        0.0
                    };
                    ds[[ki, pi]] = g0 * (1.0 - w1) + g1 * w1;
                    dp[[ki, pi]] = s * (g1 - g0);
                }
            }
            vec![Some(ds), Some(dp)]
        }),
    )
}

/// Trilinear resize of `x (C,A,B,D)` to `(C, ta, tb, td)`, sampling source
/// positions at `(i + 0.5) * src / dst - 0.5` (pixel-centre alignment).
pub fn resize3d_linear(x: &Tensor, target: (usize, usize, usize)) -> Tensor {
    let xv = x
        .value()
        .into_dimensionality::<Ix4>()
        .expect("resize3d_linear input must be (C,A,B,D)");
    let (c, na, nb, nd) = xv.dim();
    let (ta, tb, td) = target;

    fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5)
                    .clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    }
    let ta_taps = axis_taps(na, ta);
    let tb_taps = axis_taps(nb, tb);
    let td_taps = axis_taps(nd, td);

    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, ta, tb, td]));
    for ci in 0..c {
        for (ia, &(a0, a1, wa)) in ta_taps.iter().enumerate() {
            for (ib, &(b0, b1, wb)) in tb_taps.iter().enumerate() {
                for (id, &(d0, d1, wd)) in td_taps.iter().enumerate() {
                    let mut acc = 0.0;
                    for (aa, fa) in [(a0, 1.0 - wa), (a1, wa)] {
                        for (bb, fb) in [(b0, 1.0 - wb), (b1, wb)] {
                            for (dd, fd) in [(d0, 1.0 - wd), (d1, wd)] {
                                acc += xv[[ci, aa, bb, dd]] * fa * fb * fd;
                            }
                        }
                    }
                    out[[ci, ia, ib, id]] = acc;
                }
            }
        }
    }

    x.graph().custom(
        &[x],
        out,
        Box::new(move |g| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, na, nb, nd]));
            for ci in 0..c {
                for (ia, &(a0, a1, wa)) in ta_taps.iter().enumerate() {
                    for (ib, &(b0, b1, wb)) in tb_taps.iter().enumerate() {
                        for (id, &(d0, d1, wd)) in td_taps.iter().enumerate() {
                            let gv = g[[ci, ia, ib, id]];
                            for (aa, fa) in [(a0, 1.0 - wa), (a1, wa)] {
                                for (bb, fb) in [(b0, 1.0 - wb), (b1, wb)] {
                                    for (dd, fd) in [(d0, 1.0 - wd), (d1, wd)] {
                                        dx[[ci, aa, bb, dd]] += gv * fa * fb * fd;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}
