//! Central-difference gradient verification.
//!
//! `build` reconstructs the scalar loss from leaf values; the checker
//! compares the reverse-mode gradient against `(f(x+h) - f(x-h)) / 2h` at a
//! random subset of coordinates and reports the worst relative error.

use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Tensor};

#[derive(Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn eval(build: &dyn Fn(&Graph, &[Tensor]) -> Tensor, inputs: &[ArrayD<f64>]) -> f64 {
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    build(&g, &leaves).scalar()
}

/// Check d(loss)/d(inputs) at up to `coords_per_input` coordinates of each
/// input. `eps` is scaled by the coordinate's magnitude.
pub fn finite_diff_check(
    build: &dyn Fn(&Graph, &[Tensor]) -> Tensor,
    inputs: &[ArrayD<f64>],
    eps: f64,
    coords_per_input: usize,
    seed: u64,
) -> FdReport {
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let loss = build(&g, &leaves);
    assert_eq!(loss.len(), 1, "finite_diff_check loss must be scalar");
    let grads = g.backward(&loss);
    let analytic: Vec<ArrayD<f64>> = leaves.iter().map(|t| grads.get_or_zeros(t)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };

    for (ii, input) in inputs.iter().enumerate() {
        let n = input.len();
        if n == 0 {
            continue;
        }
        let picks: Vec<usize> = if n <= coords_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords_per_input).into_vec()
        };
        for flat in picks {
            let x0 = input.as_slice().unwrap()[flat];
            let h = eps * x0.abs().max(1.0);

            let mut plus = inputs.to_vec();
            plus[ii].as_slice_mut().unwrap()[flat] = x0 + h;
            let fp = eval(build, &plus);

            let mut minus = inputs.to_vec();
            minus[ii].as_slice_mut().unwrap()[flat] = x0 - h;
            let fm = eval(build, &minus);

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ii].as_slice().unwrap()[flat];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((ii, flat, a, numeric));
            }
        }
    }
    report
}
