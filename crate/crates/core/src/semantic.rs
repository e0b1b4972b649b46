//! Image encoder and language-guided feature fusion.
//!
//! Each camera view is encoded into three aligned maps at 1/4 resolution:
//! a texture trunk `f_t`, a compact visual map `f_vis` that lives in the
//! same space as the class-name text embeddings, and a context map `f_con`.
//! A per-pixel similarity between the text rows and `f_vis` produces a
//! semantic score map, and a cross-attention block folds all three maps
//! into the fused context `f_fusion` that the rest of the pipeline
//! consumes.

use crate::error::{Error, Result};
use crate::nn::{conv2d_layer, map_to_tokens, multihead_attention, tokens_to_map};
use crate::scene::SemanticClassSet;
use cdscene_tensor::param::{fnv1a, normal_init};
use cdscene_tensor::sample::bilinear_sample2d;
use cdscene_tensor::{Session, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};

/// Channel width of the texture trunk and context map.
pub const C_TRUNK: usize = 32;
/// Channel width of the visual/text joint space.
pub const C_EMBED: usize = 16;
/// Downsampling factor from image to feature resolution.
pub const FEATURE_STRIDE: usize = 4;
/// Attention heads used when folding the maps together.
pub const FUSION_HEADS: usize = 4;

/// Per-view encoder outputs, all at 1/4 of image resolution.
pub struct ImageFeatures {
    /// Texture trunk, matched across views for stereo scoring.
    pub f_t: Tensor,
    /// Visual map in the text-embedding space.
    pub f_vis: Tensor,
    /// Context map carrying the residual path of the fusion block.
    pub f_con: Tensor,
}

/// Deterministic unit-norm text embedding per class name (empty included).
/// Rows depend only on the class name and the seed, never on declaration
/// order, so renaming-stable checkpoints re-derive identical rows.
pub fn embed_text(class_set: &SemanticClassSet, dim: usize, seed: u64) -> ArrayD<f64> {
    let q = class_set.count();
    let mut out = ArrayD::zeros(IxDyn(&[q, dim]));
    for (row, name) in class_set.names().iter().enumerate() {
        let v = normal_init(&[dim], 1.0, seed ^ fnv1a(name));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for d in 0..dim {
            out[[row, d]] = v[[d]] / norm;
        }
    }
    out
}

/// Shared two-stage strided encoder. Image `(3,H,W)` must have both sides
/// divisible by the feature stride.
pub fn encode_image(sess: &Session, image: &Tensor) -> Result<ImageFeatures> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::DimMismatch(format!(
            "expected a (3,H,W) image, got {s:?}"
        )));
    }
    if s[1] % FEATURE_STRIDE != 0 || s[2] % FEATURE_STRIDE != 0 {
        return Err(Error::Invalid(format!(
            "image sides {}x{} must be divisible by {}",
            s[1], s[2], FEATURE_STRIDE
        )));
    }
    let h1 = conv2d_layer(sess, "enc.c1", image, 16, 3, 2, 1, 1).relu();
    let f_t = conv2d_layer(sess, "enc.c2", &h1, C_TRUNK, 3, 2, 1, 1).relu();
    let f_vis = conv2d_layer(sess, "enc.vis", &f_t, C_EMBED, 1, 1, 0, 1);
    let f_con = conv2d_layer(sess, "enc.con", &f_t, C_TRUNK, 3, 1, 1, 1).relu();
    Ok(ImageFeatures { f_t, f_vis, f_con })
}

/// Per-pixel similarity between every text row and the visual map.
/// `text (Q,C)` rows are unit vectors; each pixel of `f_vis (C,h,w)` is
/// scored by its dot product normalized by the pixel magnitude, so scores
/// live in [-1,1] and an all-zero pixel scores 0 for every class.
pub fn semantic_map(sess: &Session, text: &ArrayD<f64>, f_vis: &Tensor) -> Tensor {
    let (c, h, w) = {
        let s = f_vis.shape();
        (s[0], s[1], s[2])
    };
    assert_eq!(text.shape()[1], c, "text dim must match visual channels");
    let t = sess.graph().constant(text.clone());
    let flat = f_vis.reshape(&[c, h * w]);
    let dots = t.matmul(&flat);
    let norm = flat.square().sum_axis(0, true).sqrt().add_scalar(1e-12);
    dots.div(&norm).reshape(&[text.shape()[0], h, w])
}

/// Folds the semantic, visual, and context maps into one fused context.
/// The concatenated stack runs through two convolutions, then the context
/// map queries it with multi-head attention; the block is residual on the
/// context path.
pub fn fuse_features(
    sess: &Session,
    f_sem: &Tensor,
    f_vis: &Tensor,
    f_con: &Tensor,
) -> Tensor {
    let (h, w) = {
        let s = f_con.shape();
        (s[1], s[2])
    };
    let stack = Tensor::concat(&[f_sem, f_vis, f_con], 0);
    let mixed = conv2d_layer(sess, "fuse.c1", &stack, C_TRUNK, 3, 1, 1, 1).relu();
    let f_vis_hat = conv2d_layer(sess, "fuse.c2", &mixed, C_TRUNK, 3, 1, 1, 1);
    let q = map_to_tokens(f_con);
    let kv = map_to_tokens(&f_vis_hat);
    let attended = multihead_attention(sess, "fuse.attn", &q, &kv, FUSION_HEADS);
    tokens_to_map(&attended, h, w).add(f_con)
}

/// Samples a feature map `(C,h,w)` at fractional pixel positions given in
/// feature-grid node coordinates (x along width, y along height), with
/// border clamping. Returns `(C,N)`.
pub fn grid_sample_2d(map: &Tensor, points: &Array2<f64>) -> Tensor {
    bilinear_sample2d(map, points)
}
