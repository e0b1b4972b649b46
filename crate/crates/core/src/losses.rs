//! Training objective.
//!
//! Five voxel/depth terms plus two point-sample terms feed a weighted
//! total. All losses take flat `(N, classes)` probability rows (already
//! softmaxed) and plain label slices, so they are usable both for the
//! full voxel grid and for sparse point sets.

use crate::depth::DepthBins;
use crate::error::{Error, Result};
use crate::metrics::IGNORE_LABEL;
use crate::nn::linear_layer;
use cdscene_tensor::sample::gather1d;
use cdscene_tensor::{Session, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Clamp floor used inside every logarithm.
pub const LOG_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ssc: f64,
    pub lambda_point: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ssc: 1.0, lambda_point: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ssc.is_finite() && self.lambda_ssc >= 0.0)
            || !(self.lambda_point.is_finite() && self.lambda_point >= 0.0)
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalMode {
    /// One affinity term per semantic class (empty included).
    Semantic,
    /// Classes collapsed to occupied/empty before scoring.
    Geometric,
}

fn check_rows(probs: &Tensor) -> Result<(usize, usize)> {
    let s = probs.shape();
    if s.len() != 2 {
        return Err(Error::DimMismatch(format!(
            "expected (voxels, classes) probabilities, got {s:?}"
        )));
    }
    let v = probs.value();
    for r in 0..s[0] {
        let sum: f64 = (0..s[1]).map(|c| v[[r, c]]).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Invalid(format!(
                "probability row {r} sums to {sum}, not 1"
            )));
        }
    }
    Ok((s[0], s[1]))
}

/// Scene-class affinity: for every counted class the loss adds the
/// negative logs of precision (predicted mass on true voxels over all
/// predicted mass), recall (predicted mass on true voxels over their
/// count), and specificity (complement mass off-class over off-class
/// count). A term whose denominator is empty is dropped; a class with
/// neither ground-truth voxels nor predicted mass is skipped entirely.
/// The result is the mean over counted classes.
pub fn scal_loss(probs: &Tensor, labels: &[u8], mode: ScalMode, ignore: u8) -> Result<Tensor> {
    let (n, c) = check_rows(probs)?;
    if labels.len() != n {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    let g = probs.graph();

    // In geometric mode fold all non-empty classes into one column.
    let (p, eff_labels, n_classes): (Tensor, Vec<u8>, usize) = match mode {
        ScalMode::Semantic => (probs.clone(), labels.to_vec(), c),
        ScalMode::Geometric => {
            let empty = probs.narrow(1, 0, 1);
            let occupied = probs.narrow(1, 1, c - 1).sum_axis(1, true);
            let folded = Tensor::concat(&[&empty, &occupied], 1);
            let lab = labels
                .iter()
                .map(|&l| if l == ignore { ignore } else { u8::from(l != 0) })
                .collect();
            (folded, lab, 2)
        }
    };

    let mut total: Option<Tensor> = None;
    let mut counted = 0usize;
    for class in 0..n_classes {
        let mut gt_mask = ArrayD::zeros(IxDyn(&[n, 1]));
        let mut off_mask = ArrayD::zeros(IxDyn(&[n, 1]));
        let mut valid_mask = ArrayD::zeros(IxDyn(&[n, 1]));
        let (mut gt_count, mut off_count) = (0usize, 0usize);
        for (i, &l) in eff_labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            valid_mask[[i, 0]] = 1.0;
            if l as usize == class {
                gt_mask[[i, 0]] = 1.0;
                gt_count += 1;
            } else {
                off_mask[[i, 0]] = 1.0;
                off_count += 1;
            }
        }
        let p_c = p.narrow(1, class, 1);
        let pred_mass = p_c.mul(&g.constant(valid_mask)).sum_all();
        let has_pred = pred_mass.scalar() > 0.0;
        if gt_count == 0 && !has_pred {
            continue;
        }
        counted += 1;
        let nom = p_c.mul(&g.constant(gt_mask)).sum_all();
        let mut class_term: Option<Tensor> = None;
        let push = |t: Tensor, acc: &mut Option<Tensor>| {
            *acc = Some(match acc.take() {
                Some(prev) => prev.add(&t),
                None => t,
            });
        };
        if has_pred {
            let precision = nom.div(&pred_mass);
            push(precision.ln_clamped(LOG_EPS), &mut class_term);
        }
        if gt_count > 0 {
            let recall = nom.scale(1.0 / gt_count as f64);
            push(recall.ln_clamped(LOG_EPS), &mut class_term);
        }
        if off_count > 0 {
            let one = g.constant(ArrayD::ones(IxDyn(&[1])));
            let spec_nom = one.sub(&p_c).mul(&g.constant(off_mask)).sum_all();
            let specificity = spec_nom.scale(1.0 / off_count as f64);
            push(specificity.ln_clamped(LOG_EPS), &mut class_term);
        }
        if let Some(t) = class_term {
            push(t, &mut total);
        }
    }
    match total {
        Some(t) if counted > 0 => Ok(t.scale(-1.0 / counted as f64)),
        _ => Ok(g.constant(ArrayD::zeros(IxDyn(&[1])))),
    }
}

fn argsort_desc(vals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    idx
}

/// Convex surrogate of one minus the Jaccard index, averaged over the
/// classes that appear in the ground truth. Per class the prediction
/// errors are sorted once (the permutation is data, not differentiated)
/// and dotted with the discrete gradient of the Jaccard loss along the
/// sorted ground-truth indicator.
pub fn lovasz_softmax(probs: &Tensor, labels: &[u8], ignore: u8) -> Result<Tensor> {
    let (n, c) = check_rows(probs)?;
    if labels.len() != n {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    let g = probs.graph();
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != ignore).collect();
    if valid.is_empty() {
        return Ok(g.constant(ArrayD::zeros(IxDyn(&[1]))));
    }

    let mut total: Option<Tensor> = None;
    let mut present = 0usize;
    for class in 0..c {
        let gt: Vec<f64> = valid
            .iter()
            .map(|&i| f64::from(labels[i] as usize == class))
            .collect();
        let fg: f64 = gt.iter().sum();
        if fg == 0.0 {
            continue;
        }
        present += 1;
        // e_i = 1 - p for foreground, p for background, written without
        // an absolute value so there is no kink.
        let p_flat = probs.narrow(1, class, 1).reshape(&[n]);
        let p_sel = gather1d(&p_flat, &valid);
        let sign: Vec<f64> = gt.iter().map(|&t| 1.0 - 2.0 * t).collect();
        let offset = g.constant(ArrayD::from_shape_vec(IxDyn(&[valid.len()]), gt.clone()).unwrap());
        let scalev = g.constant(ArrayD::from_shape_vec(IxDyn(&[valid.len()]), sign).unwrap());
        let errors = offset.add(&scalev.mul(&p_sel));

        let perm = argsort_desc(errors.value().as_slice().unwrap());
        let sorted = gather1d(&errors, &perm);
        // Discrete Jaccard gradient along the sorted ground truth.
        let mut grad = vec![0.0; perm.len()];
        let mut inter = fg;
        let mut union = fg;
        let mut prev = 0.0;
        for (k, &pi) in perm.iter().enumerate() {
            if gt[pi] > 0.5 {
                inter -= 1.0;
            } else {
                union += 1.0;
            }
            let jac = 1.0 - inter / union;
            grad[k] = jac - prev;
            prev = jac;
        }
        let delta = g.constant(ArrayD::from_shape_vec(IxDyn(&[perm.len()]), grad).unwrap());
        let class_loss = sorted.mul(&delta).sum_all();
        total = Some(match total {
            Some(t) => t.add(&class_loss),
            None => class_loss,
        });
    }
    match total {
        Some(t) => Ok(t.scale(1.0 / present as f64)),
        None => Ok(g.constant(ArrayD::zeros(IxDyn(&[1])))),
    }
}

/// Mean negative log-likelihood of the true class over non-ignored rows.
pub fn ce_loss(probs: &Tensor, labels: &[u8], ignore: u8) -> Result<Tensor> {
    let (n, c) = check_rows(probs)?;
    if labels.len() != n {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    let g = probs.graph();
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != ignore).collect();
    if valid.is_empty() {
        return Ok(g.constant(ArrayD::zeros(IxDyn(&[1]))));
    }
    for &i in &valid {
        if labels[i] as usize >= c {
            return Err(Error::Invalid(format!(
                "label {} out of range for {c} classes",
                labels[i]
            )));
        }
    }
    let logp = probs.ln_clamped(LOG_EPS);
    let rows: Vec<usize> = valid.clone();
    let cols: Vec<usize> = valid.iter().map(|&i| labels[i] as usize).collect();
    // Select the true-class log-probability per valid row.
    let flat = logp.reshape(&[n * c]);
    let idx: Vec<usize> = rows.iter().zip(&cols).map(|(&r, &cc)| r * c + cc).collect();
    let picked = gather1d(&flat, &idx);
    Ok(picked.mean_all().scale(-1.0))
}

/// Per-pixel binary cross-entropy between a depth distribution `(D,h,w)`
/// and the one-hot bin of the metric ground truth. Pixels with no valid
/// depth (zero or outside the bin range) are skipped; the flag reports
/// the degenerate all-invalid case, where the loss is zero.
pub fn depth_bce(
    d_pred: &Tensor,
    depth_gt: &Array2<f64>,
    bins: &DepthBins,
) -> Result<(Tensor, bool)> {
    let s = d_pred.shape();
    if s.len() != 3 || s[0] != bins.count {
        return Err(Error::DimMismatch(format!(
            "expected ({},h,w) depth distribution, got {s:?}",
            bins.count
        )));
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    if depth_gt.dim() != (h, w) {
        return Err(Error::DimMismatch(format!(
            "depth ground truth {:?} does not match {h}x{w}",
            depth_gt.dim()
        )));
    }
    let g = d_pred.graph();
    let mut target = ArrayD::zeros(IxDyn(&[d, h, w]));
    let mut valid = ArrayD::zeros(IxDyn(&[1, h, w]));
    let mut n_valid = 0usize;
    for i in 0..h {
        for j in 0..w {
            let z = depth_gt[[i, j]];
            if z <= 0.0 {
                continue;
            }
            if let Some(b) = bins.bin_of(z) {
                target[[b, i, j]] = 1.0;
                valid[[0, i, j]] = 1.0;
                n_valid += 1;
            }
        }
    }
    if n_valid == 0 {
        return Ok((g.constant(ArrayD::zeros(IxDyn(&[1]))), true));
    }
    let t = g.constant(target);
    let one = g.constant(ArrayD::ones(IxDyn(&[1])));
    let pos = t.mul(&d_pred.ln_clamped(LOG_EPS));
    let neg = one.sub(&t).mul(&one.sub(d_pred).ln_clamped(LOG_EPS));
    let per_pixel = pos.add(&neg).scale(-1.0).sum_axis(0, true);
    let masked = per_pixel.mul(&g.constant(valid));
    Ok((masked.sum_all().scale(1.0 / n_valid as f64), false))
}

/// Classifies sparse sample points from their image feature column
/// `(C_f,N)` and volume feature column `(C_v,N)`: channels concatenated,
/// two linear layers, softmax over classes. Returns `(N, classes)` rows.
pub fn point_head(
    sess: &Session,
    f_point: &Tensor,
    v_point: &Tensor,
    n_classes: usize,
) -> Tensor {
    let rows = Tensor::concat(&[f_point, v_point], 0).permute(&[1, 0]);
    let width = rows.shape()[1];
    let hidden = linear_layer(sess, "point.l1", &rows, width).relu();
    linear_layer(sess, "point.l2", &hidden, n_classes).softmax(1)
}

/// Cross-entropy plus the Jaccard surrogate on point predictions.
pub fn point_loss(probs: &Tensor, labels: &[u8]) -> Result<(Tensor, Tensor)> {
    let ce = ce_loss(probs, labels, IGNORE_LABEL)?;
    let lv = lovasz_softmax(probs, labels, IGNORE_LABEL)?;
    Ok((ce, lv))
}

/// The individual objective terms, still attached to the graph.
pub struct LossTerms {
    pub scal_sem: Tensor,
    pub scal_geo: Tensor,
    pub ce: Tensor,
    pub depth_d: Tensor,
    pub depth_s: Tensor,
    pub point_ce: Tensor,
    pub point_lovasz: Tensor,
}

/// Scalar snapshot of the terms for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub scal_sem: f64,
    pub scal_geo: f64,
    pub ce: f64,
    pub depth_d: f64,
    pub depth_s: f64,
    pub point_ce: f64,
    pub point_lovasz: f64,
    pub total: f64,
}

/// Weighted sum of the term groups. Any NaN component is a hard error
/// naming the offending term.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    for (name, t) in [
        ("scal_sem", &terms.scal_sem),
        ("scal_geo", &terms.scal_geo),
        ("ce", &terms.ce),
        ("depth_d", &terms.depth_d),
        ("depth_s", &terms.depth_s),
        ("point_ce", &terms.point_ce),
        ("point_lovasz", &terms.point_lovasz),
    ] {
        if t.scalar().is_nan() {
            return Err(Error::Numeric(format!("loss component {name}")));
        }
    }
    let ssc = terms
        .scal_sem
        .add(&terms.scal_geo)
        .add(&terms.ce)
        .add(&terms.depth_d)
        .add(&terms.depth_s);
    let point = terms.point_ce.add(&terms.point_lovasz);
    Ok(ssc.scale(weights.lambda_ssc).add(&point.scale(weights.lambda_point)))
}

impl LossTerms {
    pub fn report(&self, total: &Tensor) -> LossReport {
        LossReport {
            scal_sem: self.scal_sem.scalar(),
            scal_geo: self.scal_geo.scalar(),
            ce: self.ce.scalar(),
            depth_d: self.depth_d.scalar(),
            depth_s: self.depth_s.scalar(),
            point_ce: self.point_ce.scalar(),
            point_lovasz: self.point_lovasz.scalar(),
            total: total.scalar(),
        }
    }
}
