//! Probabilistic depth over a fixed set of bins.
//!
//! Depth is represented as a categorical distribution over uniform bins.
//! Three estimators feed it: a monocular head, a same-frame stereo cost
//! volume, and a temporal multi-view matcher that scores per-pixel depth
//! candidates against past frames. Gated mixers blend each matcher with
//! the monocular prior so texture-poor pixels degrade gracefully.

use crate::error::{Error, Result};
use crate::nn::conv2d_layer;
use crate::scene::{CameraIntrinsics, CameraPose};
use cdscene_tensor::sample::bilinear_sample2d;
use cdscene_tensor::{Session, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};

/// Number of depth candidates scored by the temporal matcher per pixel.
pub const TEMPORAL_CANDIDATES: usize = 8;
/// Channel groups used when correlating stereo features.
pub const COST_GROUPS: usize = 4;

/// Uniform partition of a metric depth interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthBins {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        if !(d_min > 0.0 && d_max > d_min) || count < 2 {
            return Err(Error::Invalid(format!(
                "depth bins need 0 < d_min < d_max and at least 2 bins, got [{d_min},{d_max}] x{count}"
            )));
        }
        Ok(Self { d_min, d_max, count })
    }

    /// Small range used throughout the tests: [1.0, 12.8] in 16 bins.
    pub fn toy() -> Self {
        Self { d_min: 1.0, d_max: 12.8, count: 16 }
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.width();
        (0..self.count).map(|i| self.d_min + (i as f64 + 0.5) * w).collect()
    }

    /// Bin index holding metric depth `z`, or None outside the range.
    /// The far boundary belongs to the last bin.
    pub fn bin_of(&self, z: f64) -> Option<usize> {
        if !(z >= self.d_min && z <= self.d_max) {
            return None;
        }
        let i = ((z - self.d_min) / self.width()) as usize;
        Some(i.min(self.count - 1))
    }
}

/// Monocular depth distribution from the fused context map.
/// `f (C,h,w)` -> softmax over bins, `(D,h,w)`.
pub fn mono_depth_head(sess: &Session, f: &Tensor, bins: &DepthBins) -> Tensor {
    let c = f.shape()[0];
    let h1 = conv2d_layer(sess, "mono.c1", f, c, 3, 1, 1, 1).relu();
    conv2d_layer(sess, "mono.c2", &h1, bins.count, 3, 1, 1, 1).softmax(0)
}

/// Same-frame stereo matching volume. For each depth bin the right image
/// features are shifted by the corresponding disparity and correlated
/// with the left features: channels are split into groups, each group
/// contributes its mean dot product, and the groups are averaged. Pixels
/// whose shifted sample would leave the image score exactly zero.
/// `fx_feat` and `baseline` fix disparity = fx_feat * baseline / depth at
/// feature resolution. Returns raw scores `(D,h,w)`.
pub fn stereo_cost_volume(
    f_l: &Tensor,
    f_r: &Tensor,
    fx_feat: f64,
    baseline: f64,
    bins: &DepthBins,
    groups: usize,
) -> Result<Tensor> {
    let s = f_l.shape();
    if f_r.shape() != s {
        return Err(Error::DimMismatch(format!(
            "stereo feature shapes differ: {:?} vs {:?}",
            s,
            f_r.shape()
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Invalid(format!(
            "channel count {c} must be divisible by {groups} correlation groups"
        )));
    }
    if !(fx_feat > 0.0 && baseline > 0.0) {
        return Err(Error::Invalid(
            "stereo correlation needs positive focal length and baseline".into(),
        ));
    }
    let g = f_l.graph();
    let fl_flat = f_l.reshape(&[c, h * w]);
    let mut per_bin = Vec::with_capacity(bins.count);
    for d in bins.centers() {
        let disp = fx_feat * baseline / d;
        let mut pts = Array2::zeros((h * w, 2));
        let mut mask = ArrayD::zeros(IxDyn(&[1, h * w]));
        for i in 0..h {
            for j in 0..w {
                let x = j as f64 - disp;
                pts[[i * w + j, 0]] = x;
                pts[[i * w + j, 1]] = i as f64;
                if x >= 0.0 && x <= (w - 1) as f64 {
                    mask[[0, i * w + j]] = 1.0;
                }
            }
        }
        let shifted = bilinear_sample2d(f_r, &pts);
        let prod = fl_flat.mul(&shifted).reshape(&[groups, c / groups, h * w]);
        let corr = prod.mean_axis(1, false).mean_axis(0, true);
        per_bin.push(corr.mul(&g.constant(mask)).reshape(&[1, h, w]));
    }
    Ok(Tensor::concat(&per_bin.iter().collect::<Vec<_>>(), 0))
}

/// Gated blend of a matching volume with the monocular distribution.
/// A learned per-bin gate weighs softmaxed matcher scores against the
/// prior; the blend is renormalized so the result stays a distribution.
/// `prefix` namespaces the gate so each matcher owns its own weights.
pub fn mie_fuse(sess: &Session, prefix: &str, f_bino: &Tensor, d_mono: &Tensor) -> Tensor {
    let d = f_bino.shape()[0];
    assert_eq!(d_mono.shape(), f_bino.shape(), "bin counts must agree");
    let stack = Tensor::concat(&[f_bino, &d_mono.ln_clamped(1e-6)], 0);
    let gate = conv2d_layer(sess, &format!("{prefix}.gate"), &stack, d, 3, 1, 1, 1).sigmoid();
    let p_match = f_bino.softmax(0);
    let one = sess.graph().constant(ArrayD::ones(IxDyn(&[1])));
    let blend = gate.mul(&p_match).add(&one.sub(&gate).mul(d_mono));
    let total = blend.sum_axis(0, true).add_scalar(1e-12);
    blend.div(&total)
}

/// Warps source-view features onto the reference view at one depth
/// hypothesis per pixel. Each reference pixel center is unprojected at
/// `depth`, moved through `rel` (reference camera to source camera), and
/// projected into the source feature grid; features are read there with
/// bilinear interpolation. The returned mask is 1 where the source point
/// is in front of the camera and lands inside the feature grid. Geometry
/// here is plain data: gradients flow through the sampled feature values
/// only.
pub fn homography_warp(
    f_src: &Tensor,
    intr_feat: &CameraIntrinsics,
    rel: &CameraPose,
    depth: &Array2<f64>,
) -> (Tensor, Array2<f64>) {
    let s = f_src.shape();
    let (h, w) = (s[1], s[2]);
    assert_eq!(depth.dim(), (h, w), "depth map must match feature grid");
    let mut pts = Array2::zeros((h * w, 2));
    let mut mask = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let z = depth[[i, j]];
            let p_ref = [
                (j as f64 + 0.5 - intr_feat.cx) / intr_feat.fx * z,
                (i as f64 + 0.5 - intr_feat.cy) / intr_feat.fy * z,
                z,
            ];
            let p_src = rel.cam_to_world(p_ref);
            if p_src[2] > 1e-9 {
                let u = intr_feat.fx * p_src[0] / p_src[2] + intr_feat.cx;
                let v = intr_feat.fy * p_src[1] / p_src[2] + intr_feat.cy;
                let x = u - 0.5;
                let y = v - 0.5;
                pts[[i * w + j, 0]] = x;
                pts[[i * w + j, 1]] = y;
                if x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64 {
                    mask[[i, j]] = 1.0;
                }
            }
        }
    }
    let sampled = bilinear_sample2d(f_src, &pts);
    (sampled.reshape(&[s[0], h, w]), mask)
}

/// Output of the temporal matcher.
pub struct TemporalStereoDepth {
    /// Final blended distribution `(D,h,w)`.
    pub dist: Tensor,
    /// Matcher-only distribution before blending `(D,h,w)`.
    pub stereo: Tensor,
    /// Per-pixel search center in metric depth `(h,w)`.
    pub center: Tensor,
    /// Per-pixel half width of the search interval `(h,w)`.
    pub range: Tensor,
    /// Blend weight toward the matcher `(1,h,w)`.
    pub weight: Tensor,
}

/// Scores per-pixel depth candidates against past-frame views.
///
/// A small head predicts a search center and half-range per pixel; the
/// midpoints of that interval become candidates, each warped into every
/// source view and scored by feature correlation. Scores are splatted
/// into the depth bins at the candidate's fractional bin position, the
/// per-pixel histogram is softmaxed, and a learned weight blends the
/// result with the monocular prior. Candidate depths stay differentiable
/// through the splat positions; the warp geometry itself does not carry
/// gradients.
pub fn temporal_stereo_depth(
    sess: &Session,
    f_ref: &Tensor,
    sources: &[(Tensor, CameraPose)],
    d_mono: &Tensor,
    intr_feat: &CameraIntrinsics,
    bins: &DepthBins,
) -> Result<TemporalStereoDepth> {
    if sources.is_empty() {
        return Err(Error::Invalid(
            "temporal matching needs at least one source view".into(),
        ));
    }
    let s = f_ref.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let g = sess.graph();
    let span = bins.d_max - bins.d_min;

    let h1 = conv2d_layer(sess, "tstereo.c1", f_ref, c, 3, 1, 1, 1).relu();
    let cr = conv2d_layer(sess, "tstereo.c2", &h1, 2, 3, 1, 1, 1);
    let center = cr.narrow(0, 0, 1).sigmoid().scale(span).add_scalar(bins.d_min);
    let range = cr.narrow(0, 1, 1).softplus().add_scalar(0.05);

    let k = TEMPORAL_CANDIDATES;
    let fl_flat = f_ref.reshape(&[c, h * w]);
    let mut score_rows = Vec::with_capacity(k);
    let mut pos_rows = Vec::with_capacity(k);
    for ki in 0..k {
        let offset = 2.0 * (ki as f64 + 0.5) / k as f64 - 1.0;
        let dep = center
            .add(&range.scale(offset))
            .clamp_range(bins.d_min, bins.d_max);
        let dep_val = dep.value();
        let dep_map = Array2::from_shape_fn((h, w), |(i, j)| dep_val[[0, i, j]]);

        let mut score: Option<Tensor> = None;
        for (f_src, rel) in sources {
            let (warped, mask) = homography_warp(f_src, intr_feat, rel, &dep_map);
            let corr = fl_flat
                .mul(&warped.reshape(&[c, h * w]))
                .mean_axis(0, true);
            let mask_t = g.constant(
                mask.into_shape_with_order(IxDyn(&[1, h * w])).unwrap(),
            );
            let masked = corr.mul(&mask_t);
            score = Some(match score {
                Some(acc) => acc.add(&masked),
                None => masked,
            });
        }
        score_rows.push(score.unwrap());
        let pos = dep
            .add_scalar(-bins.d_min)
            .scale(1.0 / bins.width())
            .add_scalar(-0.5)
            .reshape(&[1, h * w]);
        pos_rows.push(pos);
    }
    let scores = Tensor::concat(&score_rows.iter().collect::<Vec<_>>(), 0);
    let positions = Tensor::concat(&pos_rows.iter().collect::<Vec<_>>(), 0);
    let hist = cdscene_tensor::sample::splat_linear(&scores, &positions, bins.count);
    let stereo = hist.softmax(0).reshape(&[bins.count, h, w]);

    let weight = conv2d_layer(sess, "tstereo.w", f_ref, 1, 3, 1, 1, 1).sigmoid();
    let one = g.constant(ArrayD::ones(IxDyn(&[1])));
    let blend = weight
        .mul(&stereo)
        .add(&one.sub(&weight).mul(d_mono));
    let total = blend.sum_axis(0, true).add_scalar(1e-12);
    let dist = blend.div(&total);

    Ok(TemporalStereoDepth {
        dist,
        stereo,
        center: center.reshape(&[h, w]),
        range: range.reshape(&[h, w]),
        weight,
    })
}

/// Reduces a full-resolution depth map to feature resolution by taking
/// the nearest valid depth in each block. Zero marks invalid (sky) pixels
/// and survives only when a whole block is invalid.
pub fn downsample_depth_min(depth: &Array2<f64>, stride: usize) -> Array2<f64> {
    let (hh, ww) = depth.dim();
    assert!(
        stride > 0 && hh % stride == 0 && ww % stride == 0,
        "depth map sides must be divisible by the stride"
    );
    Array2::from_shape_fn((hh / stride, ww / stride), |(i, j)| {
        let mut best = f64::INFINITY;
        for di in 0..stride {
            for dj in 0..stride {
                let z = depth[[i * stride + di, j * stride + dj]];
                if z > 0.0 && z < best {
                    best = z;
                }
            }
        }
        if best.is_finite() {
            best
        } else {
            0.0
        }
    })
}
