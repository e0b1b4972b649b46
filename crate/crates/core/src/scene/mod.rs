//! Synthetic world substrate: semantic classes, voxel grids, cameras, and
//! deterministic scene generation.
//!
//! Coordinate conventions used throughout: world x points forward (away
//! from the camera), y left, z up. Camera frames follow the usual computer
//! vision layout (x right, y down, z forward); poses are camera-to-world.

pub mod io;
pub mod render;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticClassSet {
    names: Vec<String>,
}

impl SemanticClassSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() || names[0] != "empty" {
            return Err(Error::Invalid("class 0 must be named \"empty\"".into()));
        }
        for (i, a) in names.iter().enumerate() {
            for b in names.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::Invalid(format!("duplicate class name {a:?}")));
                }
            }
        }
        Ok(Self { names })
    }

    /// Number of non-empty classes.
    pub fn m(&self) -> usize {
        self.names.len() - 1
    }

    /// Total label count including empty.
    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn toy() -> Self {
        Self::new(
            ["empty", "ground", "building", "barrier", "car", "pedestrian"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], extent: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        if extent.iter().any(|&e| e <= 0.0) {
            return Err(Error::Invalid("grid extent must be positive".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid("grid dims must be positive".into()));
        }
        Ok(Self {
            origin,
            extent,
            dims,
        })
    }

    /// 12.8 x 12.8 x 3.2 units on 32x32x8 cells (0.4-unit voxels), laid out
    /// in front of the camera with one cell layer below the ground plane.
    pub fn toy() -> Self {
        Self::new([0.0, -6.4, -0.4], [12.8, 12.8, 3.2], [32, 32, 8]).unwrap()
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        [
            self.extent[0] / self.dims[0] as f64,
            self.extent[1] / self.dims[1] as f64,
            self.extent[2] / self.dims[2] as f64,
        ]
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let vs = self.voxel_size();
        [
            self.origin[0] + (ix as f64 + 0.5) * vs[0],
            self.origin[1] + (iy as f64 + 0.5) * vs[1],
            self.origin[2] + (iz as f64 + 0.5) * vs[2],
        ]
    }

    /// Cell containing a point (floor convention: boundary points belong to
    /// the higher-index cell), or None outside the grid.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let vs = self.voxel_size();
        let mut cell = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / vs[a]).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return None;
            }
            cell[a] = f as usize;
        }
        Some(cell)
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::Invalid("principal point outside image".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn toy() -> Self {
        Self::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap()
    }

    /// Intrinsics of a feature map downscaled by an integer stride.
    pub fn scaled(&self, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width / stride,
            height: self.height / stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Camera-to-world rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn mat_t(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

impl CameraPose {
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        let rtr = mat_mul(&mat_t(&rotation), &rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr[i][j] - expect).abs() > 1e-6 {
                    return Err(Error::Invalid("rotation is not orthonormal".into()));
                }
            }
        }
        let det = rotation[0][0]
            * (rotation[1][1] * rotation[2][2] - rotation[1][2] * rotation[2][1])
            - rotation[0][1] * (rotation[1][0] * rotation[2][2] - rotation[1][2] * rotation[2][0])
            + rotation[0][2] * (rotation[1][0] * rotation[2][1] - rotation[1][1] * rotation[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid("rotation determinant is not +1".into()));
        }
        Ok(p)
    }

    /// Forward-looking pose: camera z maps to world +x, camera x to world
    /// -y (rightward), camera y to world -z (downward).
    pub fn looking_forward(translation: [f64; 3]) -> Self {
        Self::new(
            [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
            translation,
        )
        .unwrap()
    }

    pub fn cam_to_world(&self, p_cam: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, p_cam);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn world_to_cam(&self, p_world: [f64; 3]) -> [f64; 3] {
        let d = [
            p_world[0] - self.translation[0],
            p_world[1] - self.translation[1],
            p_world[2] - self.translation[2],
        ];
        mat_t_vec(&self.rotation, d)
    }

    /// Transform taking points from `self`'s camera frame into `other`'s.
    pub fn relative_to(&self, other: &CameraPose) -> CameraPose {
        // other_cam <- world <- self_cam
        let rot = mat_mul(&mat_t(&other.rotation), &self.rotation);
        let t_world = [
            self.translation[0] - other.translation[0],
            self.translation[1] - other.translation[1],
            self.translation[2] - other.translation[2],
        ];
        let trans = mat_t_vec(&other.rotation, t_world);
        CameraPose {
            rotation: rot,
            translation: trans,
        }
    }

    /// World axis the camera's x axis (rightward) maps to.
    pub fn right_axis(&self) -> [f64; 3] {
        [self.rotation[0][0], self.rotation[1][0], self.rotation[2][0]]
    }

    /// Project a world point; returns (u, v, depth) with depth the camera-z
    /// distance, or None behind the camera.
    pub fn project(&self, intr: &CameraIntrinsics, p_world: [f64; 3]) -> Option<(f64, f64, f64)> {
        let pc = self.world_to_cam(p_world);
        if pc[2] <= 1e-9 {
            return None;
        }
        Some((
            intr.fx * pc[0] / pc[2] + intr.cx,
            intr.fy * pc[1] / pc[2] + intr.cy,
            pc[2],
        ))
    }

    /// World point of pixel (u, v) at camera-z `depth`.
    pub fn unproject(&self, intr: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let pc = [
            (u - intr.cx) / intr.fx * depth,
            (v - intr.cy) / intr.fy * depth,
            depth,
        ];
        self.cam_to_world(pc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub intrinsics: CameraIntrinsics,
    /// Index 0 is the current frame; higher indices step into the past.
    pub left_poses: Vec<CameraPose>,
    pub baseline: f64,
}

impl CameraRig {
    pub fn new(
        intrinsics: CameraIntrinsics,
        left_poses: Vec<CameraPose>,
        baseline: f64,
    ) -> Result<Self> {
        if left_poses.len() < 2 {
            return Err(Error::Invalid("rig needs at least 2 frames".into()));
        }
        if baseline <= 0.0 {
            return Err(Error::Invalid("baseline must be positive".into()));
        }
        Ok(Self {
            intrinsics,
            left_poses,
            baseline,
        })
    }

    /// Forward-driving rig: each past frame sits further back with a slight
    /// lateral drift so temporal pairs carry stereo parallax.
    pub fn toy(n_frames: usize) -> Self {
        let poses = (0..n_frames)
            .map(|i| {
                CameraPose::looking_forward([
                    -0.5 - 0.6 * i as f64,
                    0.3 * i as f64,
                    1.2,
                ])
            })
            .collect();
        Self::new(CameraIntrinsics::toy(), poses, 1.0).unwrap()
    }

    pub fn n_frames(&self) -> usize {
        self.left_poses.len()
    }

    /// Right camera of the stereo pair at a frame: offset along camera x.
    pub fn right_pose(&self, frame: usize) -> CameraPose {
        let left = &self.left_poses[frame];
        let rx = left.right_axis();
        CameraPose {
            rotation: left.rotation,
            translation: [
                left.translation[0] + self.baseline * rx[0],
                left.translation[1] + self.baseline * rx[1],
                left.translation[2] + self.baseline * rx[2],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub class_id: u8,
    /// Center at each frame (index 0 = current).
    pub centers: Vec<[f64; 3]>,
    pub half: [f64; 3],
    pub dynamic: bool,
}

impl SceneBox {
    pub fn contains(&self, p: [f64; 3], frame: usize) -> bool {
        let c = self.centers[frame];
        (0..3).all(|a| (p[a] - c[a]).abs() <= self.half[a])
    }

    fn overlaps(&self, other: &SceneBox, frame: usize) -> bool {
        let a = self.centers[frame];
        let b = other.centers[frame];
        (0..3).all(|ax| (a[ax] - b[ax]).abs() < self.half[ax] + other.half[ax])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub ground_height: f64,
    pub boxes: Vec<SceneBox>,
    pub class_set: SemanticClassSet,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub labels: Array3<u8>,
}

impl LabelGrid {
    pub fn dims(&self) -> [usize; 3] {
        let d = self.labels.dim();
        [d.0, d.1, d.2]
    }
}

/// Deterministic scene synthesis. Boxes alternate static/dynamic, cycle
/// through the non-ground classes, sit on the ground plane, and are placed
/// inside the camera's forward view without mutual overlap.
pub fn generate_scene(
    seed: u64,
    spec: &VoxelGridSpec,
    class_set: &SemanticClassSet,
    n_frames: usize,
    n_boxes: usize,
) -> Result<SyntheticScene> {
    if n_frames < 2 {
        return Err(Error::Invalid("n_frames must be at least 2".into()));
    }
    if n_boxes == 0 {
        return Err(Error::Invalid("n_boxes must be at least 1".into()));
    }
    if class_set.m() < 2 {
        return Err(Error::Invalid(
            "need at least one non-ground box class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_height = 0.0;
    let lo = [
        spec.origin[0],
        spec.origin[1],
        spec.origin[2],
    ];
    let hi = [
        spec.origin[0] + spec.extent[0],
        spec.origin[1] + spec.extent[1],
        spec.origin[2] + spec.extent[2],
    ];

    let n_box_classes = class_set.m() - 1; // classes 2..=M
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(n_boxes);
    for bi in 0..n_boxes {
        let class_id = 2 + (bi % n_box_classes) as u8;
        let dynamic = bi % 2 == 1;
        let mut placed = false;
        for _attempt in 0..1000 {
            let half = [
                rng.random_range(0.4..1.2),
                rng.random_range(0.4..1.2),
                rng.random_range(0.4..1.2),
            ];
            let x = rng.random_range(3.5..10.5);
            // Keep the box inside the camera's horizontal field of view.
            let y_span = 0.4 * (x + 0.5);
            let y = rng.random_range(-y_span..y_span);
            let z = ground_height + half[2];
            let vel = if dynamic {
                let sx = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                let sy = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                [
                    sx * rng.random_range(0.2..0.5),
                    sy * rng.random_range(0.2..0.5),
                    0.0,
                ]
            } else {
                [0.0, 0.0, 0.0]
            };
            let centers: Vec<[f64; 3]> = (0..n_frames)
                .map(|f| {
                    let t = f as f64;
                    [x - vel[0] * t, y - vel[1] * t, z]
                })
                .collect();
            let candidate = SceneBox {
                class_id,
                centers,
                half,
                dynamic,
            };
            let inside = (0..n_frames).all(|f| {
                let c = candidate.centers[f];
                (0..3).all(|a| c[a] - half[a] >= lo[a] && c[a] + half[a] <= hi[a])
            });
            let clear = boxes
                .iter()
                .all(|b| (0..n_frames).all(|f| !candidate.overlaps(b, f)));
            if inside && clear {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Invalid(format!(
                "could not place box {bi} without overlap after 1000 attempts"
            )));
        }
    }

    Ok(SyntheticScene {
        seed,
        ground_height,
        boxes,
        class_set: class_set.clone(),
        n_frames,
    })
}

/// Label each voxel by its center: the last box containing it wins, else
/// ground class below the ground plane, else empty.
pub fn voxelize_labels(scene: &SyntheticScene, spec: &VoxelGridSpec, frame: usize) -> LabelGrid {
    assert!(frame < scene.n_frames, "frame out of range");
    let [nx, ny, nz] = spec.dims;
    let mut labels = Array3::<u8>::zeros((nx, ny, nz));
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let c = spec.center(ix, iy, iz);
                let mut label = if c[2] < scene.ground_height { 1u8 } else { 0u8 };
                for b in &scene.boxes {
                    if b.contains(c, frame) {
                        label = b.class_id;
                    }
                }
                labels[[ix, iy, iz]] = label;
            }
        }
    }
    LabelGrid { labels }
}
