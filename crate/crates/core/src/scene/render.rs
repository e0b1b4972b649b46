//! Ray-cast rendering of synthetic scenes.
//!
//! Rays are cast through pixel centers against the ground plane and the
//! scene's boxes. Depth is the camera-z distance of the nearest hit (0 for
//! sky). Colors combine a class palette, a procedural sine texture, and a
//! lambertian shade; the texture is what gives stereo matching something to
//! lock onto.

use ndarray::{Array2, Array3};

use super::{CameraIntrinsics, CameraPose, CameraRig, SyntheticScene};

#[derive(Debug, Clone)]
pub struct RenderedView {
    /// (3, H, W), values in [0, 1].
    pub image: Array3<f64>,
    /// (H, W) camera-z depth; 0 where the ray escapes.
    pub depth: Array2<f64>,
    pub pose: CameraPose,
}

fn class_color(id: u8) -> [f64; 3] {
    match id {
        1 => [0.35, 0.30, 0.22],
        2 => [0.55, 0.55, 0.62],
        3 => [0.72, 0.45, 0.18],
        4 => [0.20, 0.35, 0.72],
        5 => [0.75, 0.28, 0.30],
        other => {
            // Procedural palette for any extra classes.
            let k = other as f64;
            [
                0.3 + 0.4 * (0.9 * k).sin().abs(),
                0.3 + 0.4 * (1.7 * k).sin().abs(),
                0.3 + 0.4 * (2.3 * k).sin().abs(),
            ]
        }
    }
}

const SKY: [f64; 3] = [0.25, 0.45, 0.75];

struct Hit {
    t: f64,
    class_id: u8,
    normal: [f64; 3],
    /// Texture coordinates: box-local offsets for boxes, world xy for ground.
    tex: [f64; 3],
}

/// Slab intersection with an axis-aligned box; returns the entry distance
/// and the axis/sign of the entered face.
fn ray_box(o: [f64; 3], d: [f64; 3], c: [f64; 3], h: [f64; 3]) -> Option<(f64, usize, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0usize;
    let mut sign = 0.0;
    for a in 0..3 {
        let lo = c[a] - h[a];
        let hi = c[a] + h[a];
        if d[a].abs() < 1e-12 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let mut t0 = (lo - o[a]) / d[a];
        let mut t1 = (hi - o[a]) / d[a];
        let mut s = -d[a].signum();
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            s = -s;
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
            sign = s;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near > 1e-9 && t_near <= t_far {
        Some((t_near, axis, sign))
    } else {
        None
    }
}

fn cast(scene: &SyntheticScene, frame: usize, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
    let mut best: Option<Hit> = None;

    if d[2].abs() > 1e-12 {
        let t = (scene.ground_height - o[2]) / d[2];
        if t > 1e-9 {
            let px = o[0] + t * d[0];
            let py = o[1] + t * d[1];
            best = Some(Hit {
                t,
                class_id: 1,
                normal: [0.0, 0.0, 1.0],
                tex: [px, py, 0.0],
            });
        }
    }

    for b in &scene.boxes {
        let c = b.centers[frame];
        if let Some((t, axis, sign)) = ray_box(o, d, c, b.half) {
            if best.as_ref().is_none_or(|h| t < h.t) {
                let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                let mut normal = [0.0; 3];
                normal[axis] = sign;
                best = Some(Hit {
                    t,
                    class_id: b.class_id,
                    normal,
                    tex: [p[0] - c[0], p[1] - c[1], p[2] - c[2]],
                });
            }
        }
    }
    best
}

fn shade(hit: &Hit) -> [f64; 3] {
    let base = class_color(hit.class_id);
    let m = if hit.class_id == 1 {
        0.7 + 0.15 * (5.0 * hit.tex[0] + 2.0 * hit.tex[1]).sin()
            + 0.15 * (2.0 * hit.tex[0] - 5.5 * hit.tex[1]).sin()
    } else {
        0.7 + 0.15 * (7.0 * hit.tex[1] + 3.0 * hit.tex[2] + 2.0 * hit.tex[0]).sin()
            + 0.15 * (3.0 * hit.tex[1] - 7.5 * hit.tex[2] + 1.0 * hit.tex[0]).sin()
    };
    let l = {
        let v: [f64; 3] = [0.4, 0.2, 1.0];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let ndotl = hit.normal[0] * l[0] + hit.normal[1] * l[1] + hit.normal[2] * l[2];
    let lambert = 0.6 + 0.4 * ndotl.max(0.0);
    [
        (base[0] * m * lambert).clamp(0.0, 1.0),
        (base[1] * m * lambert).clamp(0.0, 1.0),
        (base[2] * m * lambert).clamp(0.0, 1.0),
    ]
}

pub fn render_view(
    scene: &SyntheticScene,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    frame: usize,
) -> RenderedView {
    assert!(frame < scene.n_frames, "frame out of range");
    let (h, w) = (intr.height, intr.width);
    let mut image = Array3::<f64>::zeros((3, h, w));
    let mut depth = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let u = j as f64 + 0.5;
            let v = i as f64 + 0.5;
            let d_cam = [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0];
            let d_world = [
                pose.rotation[0][0] * d_cam[0]
                    + pose.rotation[0][1] * d_cam[1]
                    + pose.rotation[0][2] * d_cam[2],
                pose.rotation[1][0] * d_cam[0]
                    + pose.rotation[1][1] * d_cam[1]
                    + pose.rotation[1][2] * d_cam[2],
                pose.rotation[2][0] * d_cam[0]
                    + pose.rotation[2][1] * d_cam[1]
                    + pose.rotation[2][2] * d_cam[2],
            ];
            let color = match cast(scene, frame, pose.translation, d_world) {
                Some(hit) => {
                    // Direction has unit camera-z, so t is the camera depth.
                    depth[[i, j]] = hit.t;
                    shade(&hit)
                }
                None => SKY,
            };
            for c in 0..3 {
                image[[c, i, j]] = color[c];
            }
        }
    }
    RenderedView {
        image,
        depth,
        pose: *pose,
    }
}

/// Stereo pair for one frame of the rig.
pub fn render_views(
    scene: &SyntheticScene,
    rig: &CameraRig,
    frame: usize,
) -> (RenderedView, RenderedView) {
    let left = render_view(scene, &rig.intrinsics, &rig.left_poses[frame], frame);
    let right = render_view(scene, &rig.intrinsics, &rig.right_pose(frame), frame);
    (left, right)
}
