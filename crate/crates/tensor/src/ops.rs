//! Elementwise, broadcasting, reduction and shape operations.
//!
//! Binary ops broadcast like numpy (trailing axes aligned, size-1 axes
//! stretched); the backward pass sums gradients over the stretched axes via
//! [`reduce_to_shape`].

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use crate::graph::Tensor;

/// Shape produced by broadcasting `a` against `b`. Panics on mismatch.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => panic!("incompatible broadcast: {a:?} vs {b:?} ({x} vs {y})"),
        };
    }
    out
}

/// Sum `grad` down to `target` shape, undoing a broadcast.
pub fn reduce_to_shape(grad: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut out = grad.clone();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for i in 0..target.len() {
        if out.shape()[i] != target[i] {
            assert_eq!(target[i], 1, "cannot reduce axis {i} to {}", target[i]);
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    // Inserted size-1 axes can leave odd strides behind; downstream
    // reshapes expect standard layout.
    if out.is_standard_layout() {
        out
    } else {
        out.as_standard_layout().to_owned()
    }
}

fn bmap(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        let value = self.with_value(|a| other.with_value(|b| bmap(a, b, |x, y| x + y)));
        self.graph.custom(
            &[self, other],
            value,
            Box::new(move |g| {
                vec![
                    Some(reduce_to_shape(g, &sa)),
                    Some(reduce_to_shape(g, &sb)),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        let value = self.with_value(|a| other.with_value(|b| bmap(a, b, |x, y| x - y)));
        self.graph.custom(
            &[self, other],
            value,
            Box::new(move |g| {
                vec![
                    Some(reduce_to_shape(g, &sa)),
                    Some(reduce_to_shape(&-g.clone(), &sb)),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        let (av, bv) = (self.value(), other.value());
        let value = bmap(&av, &bv, |x, y| x * y);
        self.graph.custom(
            &[self, other],
            value,
            Box::new(move |g| {
                vec![
                    Some(reduce_to_shape(&bmap(g, &bv, |gv, y| gv * y), &sa)),
                    Some(reduce_to_shape(&bmap(g, &av, |gv, x| gv * x), &sb)),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.same_graph(other);
        let (sa, sb) = (self.shape(), other.shape());
        let (av, bv) = (self.value(), other.value());
        let value = bmap(&av, &bv, |x, y| x / y);
        self.graph.custom(
            &[self, other],
            value,
            Box::new(move |g| {
                let da = bmap(g, &bv, |gv, y| gv / y);
                let num = bmap(g, &av, |gv, x| gv * x);
                let db = bmap(&num, &bv, |n, y| -n / (y * y));
                vec![
                    Some(reduce_to_shape(&da, &sa)),
                    Some(reduce_to_shape(&db, &sb)),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let value = self.with_value(|v| v.mapv(|x| x * k));
        self.graph
            .custom(&[self], value, Box::new(move |g| vec![Some(g.mapv(|x| x * k))]))
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        let value = self.with_value(|v| v.mapv(|x| x + k));
        self.graph
            .custom(&[self], value, Box::new(move |g| vec![Some(g.clone())]))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Tensor {
        let input = self.value();
        let value = input.mapv(&f);
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g| {
                let mut out = g.clone();
                Zip::from(&mut out).and(&input).for_each(|o, &x| *o *= df(x));
                vec![Some(out)]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        fn sig(x: f64) -> f64 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        self.unary(sig, |x| {
            let s = sig(x);
            s * (1.0 - s)
        })
    }

    /// `ln(1 + e^x)`, computed stably; gradient is the sigmoid.
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            },
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, f64::exp)
    }

    /// Natural log of `max(x, eps)`; gradient is `1/x` above `eps`, else 0.
    pub fn ln_clamped(&self, eps: f64) -> Tensor {
        self.unary(
            move |x| x.max(eps).ln(),
            move |x| if x > eps { 1.0 / x } else { 0.0 },
        )
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |x| {
            if x > 0.0 {
                0.5 / x.sqrt()
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x| 2.0 * x)
    }

    /// Clamp to `[lo, hi]`; gradient passes through strictly inside the
    /// interval and is zero where the clamp is active.
    pub fn clamp_range(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Copy of the value that blocks gradient flow.
    pub fn detach(&self) -> Tensor {
        self.graph.constant(self.value())
    }

    pub fn sum_all(&self) -> Tensor {
        let shape = self.shape();
        let value = ndarray::arr0(self.with_value(|v| v.sum())).into_dyn();
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let shape = self.shape();
        let mut value = self.with_value(|v| v.sum_axis(Axis(axis)));
        if keepdim {
            value = value.insert_axis(Axis(axis));
        }
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g| {
                let g = if keepdim {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(axis))
                };
                let full = g
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis backward broadcast")
                    .to_owned();
                vec![Some(full)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let n = self.shape()[axis].max(1) as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let value = self.with_value(|v| {
            let mut out = v.clone();
            for mut lane in out.lanes_mut(Axis(axis)) {
                let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                lane.mapv_inplace(|x| (x - m).exp());
                let s = lane.sum();
                lane.mapv_inplace(|x| x / s);
            }
            out
        });
        let y = value.clone();
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g| {
                // dx = y * (g - sum(g * y, axis))
                let gy = g * &y;
                let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let mut dx = g.clone();
                Zip::from(&mut dx)
                    .and(&s.broadcast(g.raw_dim()).unwrap())
                    .for_each(|d, &sv| *d -= sv);
                dx *= &y;
                vec![Some(dx)]
            }),
        )
    }

    /// Reinterpret the (logical, row-major) element order in a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let old = self.shape();
        let new: Vec<usize> = shape.to_vec();
        assert_eq!(
            old.iter().product::<usize>(),
            new.iter().product::<usize>(),
            "reshape element count mismatch {old:?} -> {new:?}"
        );
        let value = self.with_value(|v| {
            let flat: Vec<f64> = v.iter().cloned().collect();
            ArrayD::from_shape_vec(IxDyn(&new), flat).unwrap()
        });
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g| {
                let flat: Vec<f64> = g.iter().cloned().collect();
                vec![Some(ArrayD::from_shape_vec(IxDyn(&old), flat).unwrap())]
            }),
        )
    }

    /// Permute axes; the result is materialized in standard layout.
    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let axes_fwd: Vec<usize> = axes.to_vec();
        assert_eq!(axes_fwd.len(), self.ndim());
        let mut inverse = vec![0usize; axes_fwd.len()];
        for (i, &a) in axes_fwd.iter().enumerate() {
            inverse[a] = i;
        }
        let value = self.with_value(|v| {
            v.view()
                .permuted_axes(IxDyn(&axes_fwd))
                .as_standard_layout()
                .to_owned()
        });
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g| {
                let back = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                vec![Some(back)]
            }),
        )
    }

    /// Slice `len` elements starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let value = self.with_value(|v| {
            v.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                .to_owned()
        });
        self.graph.custom(
            &[self],
            value,
            Box::new(move |g| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![Some(full)]
            }),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let graph = parts[0].graph.clone();
        for p in parts {
            parts[0].same_graph(p);
        }
        let views: Vec<ArrayD<f64>> = parts.iter().map(|p| p.value()).collect();
        let value = ndarray::concatenate(
            Axis(axis),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat shape mismatch");
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
        graph.custom(
            &parts.to_vec(),
            value,
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &s in &sizes {
                    out.push(Some(
                        g.slice_axis(Axis(axis), ndarray::Slice::from(off..off + s))
                            .to_owned(),
                    ));
                    off += s;
                }
                out
            }),
        )
    }
}
