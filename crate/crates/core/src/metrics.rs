//! Confusion accumulation and IoU scoring over label grids.
//!
//! Ratios that would be 0/0 are reported as the sentinel -1 (never NaN) and
//! excluded from means.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scene::{LabelGrid, SemanticClassSet, VoxelGridSpec};

pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    /// rows = ground truth, cols = prediction; includes the empty class 0.
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((n_classes, n_classes)),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accumulate(
        &mut self,
        pred: &LabelGrid,
        gt: &LabelGrid,
        ignore_label: u8,
    ) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::DimMismatch(format!(
                "pred {:?} vs gt {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let n = self.n_classes();
        for (&p, &g) in pred.labels.iter().zip(gt.labels.iter()) {
            if g == ignore_label || p == ignore_label {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(Error::Invalid(format!(
                    "label out of range: pred {p}, gt {g}, classes {n}"
                )));
            }
            self.counts[[g, p]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    fn class_tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.counts[[c, c]];
        let fp = self.counts.column(c).sum() - tp;
        let fns = self.counts.row(c).sum() - tp;
        (tp, fp, fns)
    }

    /// Per-class IoU over semantic classes 1..n and their mean. Classes
    /// with no ground truth and no predictions are -1 and excluded.
    pub fn miou(&self) -> (Vec<f64>, f64) {
        let mut per_class = Vec::with_capacity(self.n_classes() - 1);
        let mut sum = 0.0;
        let mut included = 0usize;
        for c in 1..self.n_classes() {
            let (tp, fp, fns) = self.class_tp_fp_fn(c);
            let denom = tp + fp + fns;
            if denom == 0 {
                per_class.push(-1.0);
            } else {
                let iou = tp as f64 / denom as f64;
                per_class.push(iou);
                sum += iou;
                included += 1;
            }
        }
        let miou = if included == 0 {
            -1.0
        } else {
            sum / included as f64
        };
        (per_class, miou)
    }

    /// Binary occupied-vs-empty IoU, precision, and recall.
    pub fn geometric_scores(&self) -> (f64, f64, f64) {
        let n = self.n_classes();
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fns = 0u64;
        for g in 0..n {
            for p in 0..n {
                let c = self.counts[[g, p]];
                match (g >= 1, p >= 1) {
                    (true, true) => tp += c,
                    (false, true) => fp += c,
                    (true, false) => fns += c,
                    (false, false) => {}
                }
            }
        }
        let ratio = |num: u64, den: u64| if den == 0 { -1.0 } else { num as f64 / den as f64 };
        (
            ratio(tp, tp + fp + fns),
            ratio(tp, tp + fp),
            ratio(tp, tp + fns),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub geo_iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl EvalReport {
    pub fn from_confusion(conf: &ConfusionMatrix) -> Self {
        let (per_class_iou, miou) = conf.miou();
        let (geo_iou, precision, recall) = conf.geometric_scores();
        Self {
            per_class_iou,
            miou,
            geo_iou,
            precision,
            recall,
        }
    }

    /// Flat "key = value" lines; `prefix` namespaces range-cropped entries.
    pub fn lines(&self, class_set: &SemanticClassSet, prefix: &str) -> Vec<String> {
        let mut out = vec![
            format!("{prefix}miou = {:.6}", self.miou),
            format!("{prefix}geo_iou = {:.6}", self.geo_iou),
            format!("{prefix}precision = {:.6}", self.precision),
            format!("{prefix}recall = {:.6}", self.recall),
        ];
        for (i, iou) in self.per_class_iou.iter().enumerate() {
            out.push(format!(
                "{prefix}iou.{} = {:.6}",
                class_set.name(i + 1),
                iou
            ));
        }
        out
    }
}

/// Score a prediction with the far side of the grid masked out at each
/// range: voxels whose center lies more than `r` forward of the grid origin
/// are ignored in both grids.
pub fn range_eval(
    pred: &LabelGrid,
    gt: &LabelGrid,
    spec: &VoxelGridSpec,
    n_classes: usize,
    ranges: &[f64],
) -> Result<Vec<EvalReport>> {
    for w in ranges.windows(2) {
        if w[0] > w[1] {
            return Err(Error::Invalid("ranges must be ascending".into()));
        }
    }
    let mut out = Vec::with_capacity(ranges.len());
    for &r in ranges {
        let mut conf = ConfusionMatrix::new(n_classes);
        let mut pred_m = pred.clone();
        let mut gt_m = gt.clone();
        for ix in 0..spec.dims[0] {
            let cx = (ix as f64 + 0.5) * spec.voxel_size()[0];
            if cx > r {
                for iy in 0..spec.dims[1] {
                    for iz in 0..spec.dims[2] {
                        pred_m.labels[[ix, iy, iz]] = IGNORE_LABEL;
                        gt_m.labels[[ix, iy, iz]] = IGNORE_LABEL;
                    }
                }
            }
        }
        conf.accumulate(&pred_m, &gt_m, IGNORE_LABEL)?;
        out.push(EvalReport::from_confusion(&conf));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn grid_from(labels: Vec<u8>, dims: [usize; 3]) -> LabelGrid {
        LabelGrid {
            labels: Array3::from_shape_vec((dims[0], dims[1], dims[2]), labels).unwrap(),
        }
    }

    #[test]
    fn perfect_prediction_gives_diagonal_and_unit_scores() {
        let g = grid_from(vec![0, 1, 2, 3, 4, 5, 1, 2], [2, 2, 2]);
        let mut conf = ConfusionMatrix::new(6);
        conf.accumulate(&g, &g, IGNORE_LABEL).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert_eq!(conf.counts[[i, j]], 0);
                }
            }
        }
        let (_, miou) = conf.miou();
        assert!((miou - 1.0).abs() < 1e-12);
        let (iou, p, r) = conf.geometric_scores();
        assert_eq!((iou, p, r), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_confusion_oracle() {
        // gt [1,2], pred [1,1]: IoU_1 = 1/2, IoU_2 = 0, mean over present = 0.25
        let gt = grid_from(vec![1, 2], [1, 1, 2]);
        let pred = grid_from(vec![1, 1], [1, 1, 2]);
        let mut conf = ConfusionMatrix::new(6);
        conf.accumulate(&pred, &gt, IGNORE_LABEL).unwrap();
        let (per, miou) = conf.miou();
        assert!((per[0] - 0.5).abs() < 1e-12);
        assert_eq!(per[1], 0.0);
        assert_eq!(per[2], -1.0);
        assert!((miou - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ignore_label_skips_voxels() {
        let gt = grid_from(vec![IGNORE_LABEL, 1], [1, 1, 2]);
        let pred = grid_from(vec![4, 1], [1, 1, 2]);
        let mut conf = ConfusionMatrix::new(6);
        conf.accumulate(&pred, &gt, IGNORE_LABEL).unwrap();
        assert_eq!(conf.total(), 1);
    }

    #[test]
    fn all_occupied_pred_half_occupied_gt() {
        let gt = grid_from(vec![0, 0, 2, 2], [1, 2, 2]);
        let pred = grid_from(vec![2, 2, 2, 2], [1, 2, 2]);
        let mut conf = ConfusionMatrix::new(6);
        conf.accumulate(&pred, &gt, IGNORE_LABEL).unwrap();
        let (_, p, r) = conf.geometric_scores();
        assert!((p - 0.5).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accumulation_is_additive() {
        let a_gt = grid_from(vec![1, 2, 0, 3], [1, 2, 2]);
        let a_pred = grid_from(vec![1, 1, 0, 3], [1, 2, 2]);
        let b_gt = grid_from(vec![4, 4, 5, 0], [1, 2, 2]);
        let b_pred = grid_from(vec![4, 5, 5, 2], [1, 2, 2]);
        let mut both = ConfusionMatrix::new(6);
        both.accumulate(&a_pred, &a_gt, IGNORE_LABEL).unwrap();
        both.accumulate(&b_pred, &b_gt, IGNORE_LABEL).unwrap();
        let mut merged = ConfusionMatrix::new(6);
        let mut ca = ConfusionMatrix::new(6);
        ca.accumulate(&a_pred, &a_gt, IGNORE_LABEL).unwrap();
        let mut cb = ConfusionMatrix::new(6);
        cb.accumulate(&b_pred, &b_gt, IGNORE_LABEL).unwrap();
        merged.merge(&ca);
        merged.merge(&cb);
        assert_eq!(both, merged);
    }

    #[test]
    fn miou_invariant_under_class_permutation() {
        let dims = [2, 2, 2];
        let gt = grid_from(vec![1, 2, 3, 0, 2, 1, 3, 3], dims);
        let pred = grid_from(vec![1, 2, 0, 0, 1, 1, 3, 2], dims);
        let mut c1 = ConfusionMatrix::new(6);
        c1.accumulate(&pred, &gt, IGNORE_LABEL).unwrap();
        // Swap classes 1 and 3 consistently in both grids.
        let perm = |l: u8| match l {
            1 => 3,
            3 => 1,
            x => x,
        };
        let gt_p = grid_from(gt.labels.iter().map(|&l| perm(l)).collect(), dims);
        let pred_p = grid_from(pred.labels.iter().map(|&l| perm(l)).collect(), dims);
        let mut c2 = ConfusionMatrix::new(6);
        c2.accumulate(&pred_p, &gt_p, IGNORE_LABEL).unwrap();
        assert!((c1.miou().1 - c2.miou().1).abs() < 1e-12);
    }

    #[test]
    fn range_crop_full_extent_is_noop_and_zero_is_empty() {
        let spec = VoxelGridSpec::toy();
        let n = spec.n_cells();
        let gt = grid_from((0..n).map(|i| (i % 6) as u8).collect(), spec.dims);
        let pred = grid_from((0..n).map(|i| ((i + 1) % 6) as u8).collect(), spec.dims);
        let reports = range_eval(&pred, &gt, &spec, 6, &[0.0, 12.8]).unwrap();
        let mut full = ConfusionMatrix::new(6);
        full.accumulate(&pred, &gt, IGNORE_LABEL).unwrap();
        let unrestricted = EvalReport::from_confusion(&full);
        assert_eq!(reports[1], unrestricted);
        assert_eq!(reports[0].miou, -1.0);
    }

    #[test]
    fn range_crop_matches_manual_crop() {
        let spec = VoxelGridSpec::toy();
        let n = spec.n_cells();
        let gt = grid_from((0..n).map(|i| ((i * 7) % 6) as u8).collect(), spec.dims);
        let pred = grid_from((0..n).map(|i| ((i * 5 + 2) % 6) as u8).collect(), spec.dims);
        let r = 6.4;
        let report = range_eval(&pred, &gt, &spec, 6, &[r]).unwrap().remove(0);
        // Manual oracle: evaluate only the first half of x slices.
        let mut conf = ConfusionMatrix::new(6);
        for ix in 0..16 {
            for iy in 0..32 {
                for iz in 0..8 {
                    let g = gt.labels[[ix, iy, iz]] as usize;
                    let p = pred.labels[[ix, iy, iz]] as usize;
                    conf.counts[[g, p]] += 1;
                }
            }
        }
        assert_eq!(report, EvalReport::from_confusion(&conf));
    }
}
