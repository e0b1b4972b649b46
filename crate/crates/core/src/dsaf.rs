//! Fusion of the two feature volumes.
//!
//! The dynamic and static volumes are combined by one of four strategies.
//! The richest one flattens both volumes to bird's-eye-view maps, refines
//! the dynamic map with global self-attention, lets it query the static
//! map through windowed cross-attention with a learned relative position
//! bias, widens the receptive field with parallel dilated convolutions,
//! and finally writes the context back into the dynamic volume through a
//! per-voxel sigmoid gate. The cheaper strategies exist as drop-in
//! replacements for comparison runs.

use crate::error::{Error, Result};
use crate::nn::{conv2d_layer, conv3d_layer, layer_norm, linear_layer, map_to_tokens, multihead_attention, tokens_to_map};
use cdscene_tensor::param::zeros_init;
use cdscene_tensor::{GradFn, Session, Tensor};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Attention geometry shared by the fusion stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Side of the square key/value window; must be odd.
    pub window_k: usize,
    pub n_self_layers: usize,
    pub n_cross_layers: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            window_k: 7,
            n_self_layers: 3,
            n_cross_layers: 2,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Invalid("attention needs at least one head".into()));
        }
        if self.window_k % 2 == 0 || self.window_k == 0 {
            return Err(Error::Invalid(format!(
                "attention window must be odd, got {}",
                self.window_k
            )));
        }
        Ok(())
    }
}

/// How the dynamic and static volumes are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Sum the volumes, then one 3-d convolution.
    AddConv,
    /// Concatenate on channels, then one 3-d convolution.
    CatConv,
    /// Dense cross-attention between the pooled maps, then the gate.
    GlobalAttention,
    /// The full adaptive path.
    Dsaf,
}

impl FusionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::AddConv => "add_conv",
            Self::CatConv => "cat_conv",
            Self::GlobalAttention => "global_attention",
            Self::Dsaf => "dsaf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add_conv" => Ok(Self::AddConv),
            "cat_conv" => Ok(Self::CatConv),
            "global_attention" => Ok(Self::GlobalAttention),
            "dsaf" => Ok(Self::Dsaf),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// Mean over the height axis: `(C,X,Y,Z)` -> `(C,X,Y)`.
pub fn height_pool(volume: &Tensor) -> Tensor {
    volume.mean_axis(3, false)
}

/// A stack of global self-attention layers over the map's pixels as
/// tokens, pre-norm with residuals. `bev (C,X,Y)` -> same shape.
pub fn self_attention(sess: &Session, bev: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    cfg.validate()?;
    let s = bev.shape();
    let (c, x, y) = (s[0], s[1], s[2]);
    if c % cfg.heads != 0 {
        return Err(Error::Invalid(format!(
            "{} heads do not divide {c} channels",
            cfg.heads
        )));
    }
    let mut tok = map_to_tokens(bev);
    for l in 0..cfg.n_self_layers {
        let normed = layer_norm(sess, &format!("dsaf.self{l}.ln"), &tok);
        let att = multihead_attention(sess, &format!("dsaf.self{l}.attn"), &normed, &normed, cfg.heads);
        tok = tok.add(&att);
    }
    Ok(tokens_to_map(&tok, x, y))
}

/// Windowed attention core. Query row t (token at grid cell (t / Y, t % Y))
/// attends to the keys inside the odd `window` x `window` square around
/// its own cell, clipped at the borders; the softmax runs over however
/// many keys survive clipping. A per-head bias indexed by the coordinate
/// offset is added to each score before the softmax. Shapes: `q,k,v
/// (N,C)` on an X x Y token grid, `bias (heads, 2w-1, 2w-1)`, output
/// `(N,C)`.
pub fn neighborhood_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: &Tensor,
    grid: (usize, usize),
    window: usize,
    heads: usize,
) -> Tensor {
    let (gx, gy) = grid;
    let n = gx * gy;
    let c = q.shape()[1];
    assert_eq!(q.shape()[0], n, "token count must match the grid");
    assert_eq!(k.shape(), q.shape());
    assert_eq!(v.shape(), q.shape());
    assert_eq!(window % 2, 1, "window must be odd");
    assert_eq!(c % heads, 0, "heads must divide channels");
    assert_eq!(bias.shape(), vec![heads, 2 * window - 1, 2 * window - 1]);
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let r = (window - 1) / 2;
    let center = window - 1;

    let qv = q.value();
    let kv = k.value();
    let vv = v.value();
    let bv = bias.value();

    let mut out = ArrayD::zeros(IxDyn(&[n, c]));
    // Caches for the backward pass: window membership, bias offsets, and
    // the attention weights per token and head.
    let mut windows: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut offsets: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n);
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(n);

    for x in 0..gx {
        for y in 0..gy {
            let t = x * gy + y;
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(gx - 1);
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(gy - 1);
            let mut win = Vec::new();
            let mut boff = Vec::new();
            for nx in x0..=x1 {
                for ny in y0..=y1 {
                    win.push(nx * gy + ny);
                    boff.push((
                        (nx + center - x) as usize,
                        (ny + center - y) as usize,
                    ));
                }
            }
            let wl = win.len();
            let mut w_all = Vec::with_capacity(heads * wl);
            for h in 0..heads {
                let base = h * dh;
                let mut scores = Vec::with_capacity(wl);
                for (m, &(bi, bj)) in win.iter().zip(boff.iter()) {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        dot += qv[[t, base + d]] * kv[[*m, base + d]];
                    }
                    scores.push(dot * scale + bv[[h, bi, bj]]);
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (mi, m) in win.iter().enumerate() {
                    let a = exps[mi] / total;
                    w_all.push(a);
                    for d in 0..dh {
                        out[[t, base + d]] += a * vv[[*m, base + d]];
                    }
                }
            }
            windows.push(win);
            offsets.push(boff);
            weights.push(w_all);
        }
    }

    let graph = q.graph();
    let (qs, ks, vs, bs) = (
        qv.clone(),
        kv.clone(),
        vv.clone(),
        bv.raw_dim(),
    );
    let grad_fn: GradFn = Box::new(move |g| {
        let mut dq = ArrayD::zeros(qs.raw_dim());
        let mut dk = ArrayD::zeros(ks.raw_dim());
        let mut dv = ArrayD::zeros(qs.raw_dim());
        let mut db = ArrayD::zeros(bs.clone());
        for t in 0..n {
            let win = &windows[t];
            let boff = &offsets[t];
            let wl = win.len();
            for h in 0..heads {
                let base = h * dh;
                let a = &weights[t][h * wl..(h + 1) * wl];
                // Per-key sensitivity of the output to the attention weight.
                let mut da = vec![0.0; wl];
                for (mi, m) in win.iter().enumerate() {
                    let mut acc = 0.0;
                    for d in 0..dh {
                        acc += g[[t, base + d]] * vs[[*m, base + d]];
                        dv[[*m, base + d]] += a[mi] * g[[t, base + d]];
                    }
                    da[mi] = acc;
                }
                let pivot: f64 = a.iter().zip(da.iter()).map(|(x, y)| x * y).sum();
                for (mi, m) in win.iter().enumerate() {
                    let ds = a[mi] * (da[mi] - pivot);
                    for d in 0..dh {
                        dq[[t, base + d]] += ds * ks[[*m, base + d]] * scale;
                        dk[[*m, base + d]] += ds * qs[[t, base + d]] * scale;
                    }
                    db[[h, boff[mi].0, boff[mi].1]] += ds;
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv), Some(db)]
    });
    graph.custom(&[q, k, v, bias], out, grad_fn)
}

/// Cross-attention layers in which the refined dynamic map queries the
/// static map within a local window. The relative position bias table is
/// shared across the layers; projections and norms are per layer. Output
/// shape matches the query map.
pub fn neighborhood_cross_attention(
    sess: &Session,
    f_d: &Tensor,
    f_s: &Tensor,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let s = f_d.shape();
    if f_s.shape() != s {
        return Err(Error::DimMismatch(format!(
            "query map {:?} and key map {:?} differ",
            s,
            f_s.shape()
        )));
    }
    let (c, x, y) = (s[0], s[1], s[2]);
    if c % cfg.heads != 0 {
        return Err(Error::Invalid(format!(
            "{} heads do not divide {c} channels",
            cfg.heads
        )));
    }
    let w = cfg.window_k;
    let bias = sess.param("dsaf.cross.bias", |_| {
        zeros_init(&[cfg.heads, 2 * w - 1, 2 * w - 1])
    });
    let s_tok = map_to_tokens(f_s);
    let mut tok = map_to_tokens(f_d);
    for l in 0..cfg.n_cross_layers {
        let qn = layer_norm(sess, &format!("dsaf.cross{l}.lnq"), &tok);
        let kn = layer_norm(sess, &format!("dsaf.cross{l}.lnk"), &s_tok);
        let qp = linear_layer(sess, &format!("dsaf.cross{l}.q"), &qn, c);
        let kp = linear_layer(sess, &format!("dsaf.cross{l}.k"), &kn, c);
        let vp = linear_layer(sess, &format!("dsaf.cross{l}.v"), &kn, c);
        let att = neighborhood_attention(&qp, &kp, &vp, &bias, (x, y), w, cfg.heads);
        let proj = linear_layer(sess, &format!("dsaf.cross{l}.o"), &att, c);
        tok = tok.add(&proj);
    }
    Ok(tokens_to_map(&tok, x, y))
}

/// Parallel context branches over a map: a 1x1 convolution, one 3x3
/// convolution per dilation rate, and a global-average branch broadcast
/// back, concatenated in that order and projected back to the input
/// width. All branches are linear.
pub fn aspp(sess: &Session, prefix: &str, x: &Tensor, rates: &[usize]) -> Tensor {
    let s = x.shape();
    let (c, gx, gy) = (s[0], s[1], s[2]);
    let mut branches = Vec::with_capacity(rates.len() + 2);
    branches.push(conv2d_layer(sess, &format!("{prefix}.c1x1"), x, c, 1, 1, 0, 1));
    for r in rates {
        branches.push(conv2d_layer(
            sess,
            &format!("{prefix}.r{r}"),
            x,
            c,
            3,
            1,
            *r,
            *r,
        ));
    }
    let pooled = x.mean_axis(2, true).mean_axis(1, true);
    let squeezed = conv2d_layer(sess, &format!("{prefix}.glob"), &pooled, c, 1, 1, 0, 1);
    let ones = x.graph().constant(ArrayD::ones(IxDyn(&[1, gx, gy])));
    branches.push(squeezed.mul(&ones));
    let cat = Tensor::concat(&branches.iter().collect::<Vec<_>>(), 0);
    conv2d_layer(sess, &format!("{prefix}.proj"), &cat, c, 1, 1, 0, 1)
}

/// Writes a context map into a volume through a per-voxel gate. A two
/// layer network maps each voxel's feature vector to a scalar in (0,1);
/// the context column for that (x,y) is scaled by the gate and added.
pub fn gated_fusion(sess: &Session, v_d: &Tensor, ctx: &Tensor) -> Result<Tensor> {
    let s = v_d.shape();
    let (c, x, y, z) = (s[0], s[1], s[2], s[3]);
    if ctx.shape() != vec![c, x, y] {
        return Err(Error::DimMismatch(format!(
            "context {:?} does not match volume {:?}",
            ctx.shape(),
            s
        )));
    }
    let tok = v_d.permute(&[1, 2, 3, 0]).reshape(&[x * y * z, c]);
    let hidden = linear_layer(sess, "fuse.gate.l1", &tok, c).relu();
    let gate = linear_layer(sess, "fuse.gate.l2", &hidden, 1).sigmoid();
    let g = gate.reshape(&[1, x, y, z]);
    let ctx_col = ctx.reshape(&[c, x, y, 1]);
    Ok(v_d.add(&g.mul(&ctx_col)))
}

/// Dilation rates for the context branches at the working map size.
pub const ASPP_RATES: [usize; 3] = [1, 2, 3];

/// Merges the two volumes with the chosen strategy. All strategies
/// preserve the volume shape.
pub fn fuse(
    sess: &Session,
    v_d: &Tensor,
    v_s: &Tensor,
    strategy: FusionStrategy,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let s = v_d.shape();
    if v_s.shape() != s {
        return Err(Error::DimMismatch(format!(
            "volume shapes differ: {:?} vs {:?}",
            s,
            v_s.shape()
        )));
    }
    let c = s[0];
    match strategy {
        FusionStrategy::AddConv => {
            Ok(conv3d_layer(sess, "fuse.add", &v_d.add(v_s), c, 3, 1))
        }
        FusionStrategy::CatConv => {
            let cat = Tensor::concat(&[v_d, v_s], 0);
            Ok(conv3d_layer(sess, "fuse.cat", &cat, c, 3, 1))
        }
        FusionStrategy::GlobalAttention => {
            let bev_d = height_pool(v_d);
            let bev_s = height_pool(v_s);
            let att = multihead_attention(
                sess,
                "fuse.gattn",
                &map_to_tokens(&bev_d),
                &map_to_tokens(&bev_s),
                cfg.heads,
            );
            let ctx = tokens_to_map(&att, s[1], s[2]).add(&bev_d);
            gated_fusion(sess, v_d, &ctx)
        }
        FusionStrategy::Dsaf => {
            let bev_d = height_pool(v_d);
            let bev_s = height_pool(v_s);
            let refined = self_attention(sess, &bev_d, cfg)?;
            let crossed = neighborhood_cross_attention(sess, &refined, &bev_s, cfg)?;
            let ctx = aspp(sess, "dsaf.aspp", &crossed, &ASPP_RATES);
            gated_fusion(sess, v_d, &ctx)
        }
    }
}
