//! Small parameterized layers shared by the feature, depth, and fusion
//! stages. Every layer binds its weights through the session by name, so
//! ablation variants that skip a stage simply never materialize its
//! parameters.

use cdscene_tensor::linalg::{conv2d, conv3d};
use cdscene_tensor::param::{kaiming_init, normal_init, ones_init, zeros_init};
use cdscene_tensor::{Session, Tensor};

/// 2-d convolution with bias. `x (Cin,H,W)` -> `(Cout,Ho,Wo)`.
pub fn conv2d_layer(
    sess: &Session,
    name: &str,
    x: &Tensor,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Tensor {
    let cin = x.shape()[0];
    let w = sess.param(&format!("{name}.w"), |s| {
        kaiming_init(&[cout, cin, k, k], s)
    });
    let b = sess.param(&format!("{name}.b"), |_| zeros_init(&[cout, 1, 1]));
    conv2d(x, &w, stride, pad, dilation).add(&b)
}

/// 3-d convolution with bias, stride 1. `x (Cin,D,H,W)` -> `(Cout,D,H,W)`.
pub fn conv3d_layer(
    sess: &Session,
    name: &str,
    x: &Tensor,
    cout: usize,
    k: usize,
    pad: usize,
) -> Tensor {
    let cin = x.shape()[0];
    let w = sess.param(&format!("{name}.w"), |s| {
        kaiming_init(&[cout, cin, k, k, k], s)
    });
    let b = sess.param(&format!("{name}.b"), |_| zeros_init(&[cout, 1, 1, 1]));
    conv3d(x, &w, pad, 1).add(&b)
}

/// Affine map over the last axis of token rows: `x (N,Cin)` -> `(N,Cout)`.
pub fn linear_layer(sess: &Session, name: &str, x: &Tensor, cout: usize) -> Tensor {
    let cin = x.shape()[1];
    let w = sess.param(&format!("{name}.w"), |s| {
        normal_init(&[cin, cout], (2.0 / cin as f64).sqrt(), s)
    });
    let b = sess.param(&format!("{name}.b"), |_| zeros_init(&[cout]));
    x.matmul(&w).add(&b)
}

/// Layer normalization over the channel axis of `x (N,C)` with learned
/// gain and shift.
pub fn layer_norm(sess: &Session, name: &str, x: &Tensor) -> Tensor {
    let c = x.shape()[1];
    let gain = sess.param(&format!("{name}.g"), |_| ones_init(&[c]));
    let shift = sess.param(&format!("{name}.b"), |_| zeros_init(&[c]));
    let mean = x.mean_axis(1, true);
    let centered = x.sub(&mean);
    let var = centered.square().mean_axis(1, true);
    let normed = centered.div(&var.add_scalar(1e-6).sqrt());
    normed.mul(&gain).add(&shift)
}

/// Dense multi-head attention over token rows. Queries come from
/// `q (Nq,C)`, keys and values from `kv (Nk,C)`; all four projections are
/// learned. Scores are scaled by the per-head width.
pub fn multihead_attention(
    sess: &Session,
    name: &str,
    q: &Tensor,
    kv: &Tensor,
    heads: usize,
) -> Tensor {
    let c = q.shape()[1];
    assert_eq!(
        kv.shape()[1],
        c,
        "query and key/value channel widths must match"
    );
    assert_eq!(c % heads, 0, "heads must divide channels");
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = linear_layer(sess, &format!("{name}.q"), q, c);
    let kp = linear_layer(sess, &format!("{name}.k"), kv, c);
    let vp = linear_layer(sess, &format!("{name}.v"), kv, c);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = qp.narrow(1, h * dh, dh);
        let kh = kp.narrow(1, h * dh, dh);
        let vh = vp.narrow(1, h * dh, dh);
        let scores = qh.matmul(&kh.permute(&[1, 0])).scale(scale);
        let attn = scores.softmax(1);
        head_outs.push(attn.matmul(&vh));
    }
    let cat = Tensor::concat(&head_outs.iter().collect::<Vec<_>>(), 1);
    linear_layer(sess, &format!("{name}.o"), &cat, c)
}

/// (C,H,W) map to (H*W, C) token rows.
pub fn map_to_tokens(x: &Tensor) -> Tensor {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2]]).permute(&[1, 0])
}

/// (N, C) token rows back to a (C,H,W) map.
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Tensor {
    let c = x.shape()[1];
    x.permute(&[1, 0]).reshape(&[c, h, w])
}
