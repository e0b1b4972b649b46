//! End-to-end model: images in, per-voxel class logits out.
//!
//! The current stereo pair feeds the language-guided feature fusion and
//! the monocular/binocular depth branch; past left frames feed the
//! temporal matcher. Each branch lifts the fused image features into a
//! half-resolution voxel volume, the volumes are merged by the configured
//! fusion strategy, and a trilinear upsample plus linear head produces
//! full-resolution logits. Ablation flags swap disabled branch volumes
//! for zeros without binding that branch's parameters.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use cdscene_tensor::{ParamStore, Session, Tensor};

use crate::config::ModelConfig;
use crate::depth::{
    mie_fuse, mono_depth_head, stereo_cost_volume, temporal_stereo_depth, COST_GROUPS,
};
use crate::dsaf::{fuse, FusionStrategy};
use crate::error::{Error, Result};
use crate::lifting::{grid_sample_3d, outer_lift, voxel_pool};
use crate::nn::{conv3d_layer, linear_layer};
use crate::scene::render::RenderedView;
use crate::scene::{CameraPose, LabelGrid, VoxelGridSpec};
use crate::semantic::{
    embed_text, encode_image, fuse_features, grid_sample_2d, semantic_map, C_EMBED,
    FEATURE_STRIDE,
};

/// One stereo observation; index 0 of a batch is the current frame.
#[derive(Debug, Clone)]
pub struct StereoFrame {
    pub left: RenderedView,
    pub right: RenderedView,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub frames: Vec<StereoFrame>,
}

/// Sparse supervision points in world space.
#[derive(Debug, Clone, Default)]
pub struct PointSet {
    pub world: Vec<[f64; 3]>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointRole {
    /// Sampled from the fused image features.
    Image,
    /// Sampled from the fused voxel volume.
    Volume,
}

/// Per-point feature columns `(C, N)` with their source tag.
pub struct PointFeatures {
    pub data: Tensor,
    pub role: PointRole,
}

pub struct ForwardOutput {
    /// `(N, M+1)` logit rows over full-resolution voxels in x-major order.
    pub logits: Tensor,
    /// Monocular depth distribution `(D,h,w)`.
    pub d_mono: Tensor,
    /// Fused dynamic-branch depth, when that branch is on.
    pub d_dynamic: Option<Tensor>,
    /// Fused static-branch depth, when that branch is on.
    pub d_static: Option<Tensor>,
    /// Fused image features `(C,h,w)`.
    pub f_fusion: Tensor,
    /// Merged feature volume `(C, X/2, Y/2, Z/2)`.
    pub volume: Tensor,
    pub f_point: Option<PointFeatures>,
    pub v_point: Option<PointFeatures>,
    /// The recording session, kept so callers can reach gradients.
    pub sess: Session,
}

pub struct Model {
    config: ModelConfig,
    store: Rc<RefCell<ParamStore>>,
}

/// Trilinear 2x upsample of the working volume onto the full grid
/// followed by a per-voxel linear layer. Returns `(N, n_out)` rows in
/// x-major voxel order.
pub fn upsample_and_project(
    sess: &Session,
    volume: &Tensor,
    full_spec: &VoxelGridSpec,
    pool_spec: &VoxelGridSpec,
    n_out: usize,
) -> Tensor {
    let [nx, ny, nz] = full_spec.dims;
    let n = nx * ny * nz;
    let mut centers = ArrayD::zeros(IxDyn(&[n, 3]));
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let p = full_spec.center(ix, iy, iz);
                let row = ix * ny * nz + iy * nz + iz;
                for a in 0..3 {
                    centers[[row, a]] = p[a];
                }
            }
        }
    }
    let rows = grid_sample_3d(volume, &centers, pool_spec).permute(&[1, 0]);
    linear_layer(sess, "head.proj", &rows, n_out)
}

impl Model {
    /// Validates the config and binds every parameter the flag set will
    /// ever use by tracing one forward pass on a blank batch.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config,
            store: Rc::new(RefCell::new(ParamStore::new())),
        };
        let batch = model.blank_batch()?;
        let probe = PointSet {
            world: vec![model.config.grid_spec()?.center(0, 0, 0)],
            labels: vec![0],
        };
        model.forward(&batch, Some(&probe))?;
        Ok(model)
    }

    /// Rebuild around an existing parameter store (checkpoint loading).
    pub fn from_parts(config: ModelConfig, store: Rc<RefCell<ParamStore>>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> Rc<RefCell<ParamStore>> {
        self.store.clone()
    }

    pub fn param_count(&self) -> usize {
        self.store.borrow().total_scalars()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.borrow().names().cloned().collect()
    }

    /// All-zero images posed by the configured rig; used to trace
    /// parameter shapes.
    fn blank_batch(&self) -> Result<Batch> {
        let rig = self.config.rig()?;
        let cam = &self.config.camera;
        let blank = |pose: CameraPose| RenderedView {
            image: ndarray::Array3::zeros((3, cam.height, cam.width)),
            depth: Array2::zeros((cam.height, cam.width)),
            pose,
        };
        let frames = (0..rig.n_frames())
            .map(|f| StereoFrame {
                left: blank(rig.left_poses[f]),
                right: blank(rig.right_pose(f)),
            })
            .collect();
        Ok(Batch { frames })
    }

    pub fn forward(&self, batch: &Batch, points: Option<&PointSet>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if batch.frames.len() != cfg.net.n_frames {
            return Err(Error::Invalid(format!(
                "batch has {} frames, config wants {}",
                batch.frames.len(),
                cfg.net.n_frames
            )));
        }
        let flags = cfg.flags;
        let class_set = cfg.class_set()?;
        let bins = cfg.depth_bins()?;
        let intr = cfg.intrinsics()?;
        let intr_feat = intr.scaled(FEATURE_STRIDE);
        let full_spec = cfg.grid_spec()?;
        let pool_spec = cfg.pool_spec()?;
        let vc = cfg.net.volume_channels;

        let sess = Session::new(self.store.clone(), cfg.seed);
        let g = sess.graph().clone();
        let as_tensor =
            |view: &RenderedView| g.constant(view.image.clone().into_dyn());

        let cur = &batch.frames[0];
        let left0 = encode_image(&sess, &as_tensor(&cur.left))?;
        let right0 = encode_image(&sess, &as_tensor(&cur.right))?;

        let f_fusion = if flags.use_lmms {
            let text = embed_text(&class_set, C_EMBED, cfg.seed);
            let f_sem = semantic_map(&sess, &text, &left0.f_vis);
            fuse_features(&sess, &f_sem, &left0.f_vis, &left0.f_con)
        } else {
            left0.f_con.clone()
        };

        // Both branches share the monocular prior and the stereo scores.
        let d_mono = mono_depth_head(&sess, &left0.f_t, &bins);
        let f_bino = stereo_cost_volume(
            &left0.f_t,
            &right0.f_t,
            intr_feat.fx,
            cfg.camera.baseline,
            &bins,
            COST_GROUPS,
        )?;

        let pose0 = cur.left.pose;
        let zero_volume = || {
            g.constant(ArrayD::zeros(IxDyn(&[
                vc,
                pool_spec.dims[0],
                pool_spec.dims[1],
                pool_spec.dims[2],
            ])))
        };
        let lift_branch = |prefix: &str, depth_dist: &Tensor| {
            let frustum = outer_lift(&f_fusion, depth_dist, &pose0, &intr_feat, &bins);
            let (pooled, _) = voxel_pool(&frustum, &pool_spec);
            let h = conv3d_layer(&sess, &format!("{prefix}.c1"), &pooled, vc, 3, 1).relu();
            conv3d_layer(&sess, &format!("{prefix}.c2"), &h, vc, 3, 1)
        };

        let (v_d, d_dynamic) = if flags.use_dynamic {
            let dd = mie_fuse(&sess, "mie_d", &f_bino, &d_mono);
            (lift_branch("enc3d_d", &dd), Some(dd))
        } else {
            (zero_volume(), None)
        };

        let (v_s, d_static) = if flags.use_static {
            let mut sources = Vec::with_capacity(batch.frames.len() - 1);
            for frame in &batch.frames[1..] {
                let feats = encode_image(&sess, &as_tensor(&frame.left))?;
                let rel = pose0.relative_to(&frame.left.pose);
                sources.push((feats.f_t, rel));
            }
            let ts = temporal_stereo_depth(&sess, &left0.f_t, &sources, &d_mono, &intr_feat, &bins)?;
            let ds = mie_fuse(&sess, "mie_s", &f_bino, &ts.dist);
            (lift_branch("enc3d_s", &ds), Some(ds))
        } else {
            (zero_volume(), None)
        };

        // Without the adaptive path the volumes are summed and smoothed
        // by one convolution; the configured strategy applies only when
        // the flag is on.
        let strategy = if flags.use_dsaf {
            cfg.fusion
        } else {
            FusionStrategy::AddConv
        };
        let volume = fuse(&sess, &v_d, &v_s, strategy, &cfg.attention)?;

        let logits = upsample_and_project(
            &sess,
            &volume,
            &full_spec,
            &pool_spec,
            class_set.count(),
        );

        let (f_point, v_point) = match points {
            Some(ps) if !ps.world.is_empty() => {
                let n = ps.world.len();
                let mut pix = Array2::zeros((n, 2));
                for (r, p) in ps.world.iter().enumerate() {
                    // Points behind the camera clamp to the map corner;
                    // synthetic grids sit fully in front so this is a guard.
                    if let Some((u, v, _)) = pose0.project(&intr_feat, *p) {
                        pix[[r, 0]] = u - 0.5;
                        pix[[r, 1]] = v - 0.5;
                    }
                }
                let mut world = ArrayD::zeros(IxDyn(&[n, 3]));
                for (r, p) in ps.world.iter().enumerate() {
                    for a in 0..3 {
                        world[[r, a]] = p[a];
                    }
                }
                let fp = grid_sample_2d(&f_fusion, &pix);
                let vp = grid_sample_3d(&volume, &world, &pool_spec);
                (
                    Some(PointFeatures {
                        data: fp,
                        role: PointRole::Image,
                    }),
                    Some(PointFeatures {
                        data: vp,
                        role: PointRole::Volume,
                    }),
                )
            }
            _ => (None, None),
        };

        Ok(ForwardOutput {
            logits,
            d_mono,
            d_dynamic,
            d_static,
            f_fusion,
            volume,
            f_point,
            v_point,
            sess,
        })
    }

    /// Argmax class per voxel from logit rows.
    pub fn decode_labels(&self, logits: &Tensor) -> Result<LabelGrid> {
        let spec = self.config.grid_spec()?;
        let [nx, ny, nz] = spec.dims;
        let v = logits.value();
        let s = v.shape().to_vec();
        if s.len() != 2 || s[0] != nx * ny * nz {
            return Err(Error::DimMismatch(format!(
                "expected ({}, classes) logit rows, got {s:?}",
                nx * ny * nz
            )));
        }
        let mut labels = ndarray::Array3::<u8>::zeros((nx, ny, nz));
        for row in 0..s[0] {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..s[1] {
                let x = v[[row, c]];
                if x > best_v {
                    best_v = x;
                    best = c;
                }
            }
            let iz = row % nz;
            let iy = (row / nz) % ny;
            let ix = row / (ny * nz);
            labels[[ix, iy, iz]] = best as u8;
        }
        Ok(LabelGrid { labels })
    }
}

/// Flat x-major copy of a label grid, matching logit row order.
pub fn flatten_labels(grid: &LabelGrid) -> Vec<u8> {
    grid.labels.iter().copied().collect()
}

/// Supervision points for one scene: every (optionally capped) occupied
/// voxel center plus an equal number of uniform in-grid samples labeled
/// by the voxel they fall in.
pub fn sample_points(
    grid: &LabelGrid,
    spec: &VoxelGridSpec,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> PointSet {
    let [nx, ny, nz] = spec.dims;
    let mut fg: Vec<([f64; 3], u8)> = Vec::new();
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let l = grid.labels[[ix, iy, iz]];
                if l != 0 {
                    fg.push((spec.center(ix, iy, iz), l));
                }
            }
        }
    }
    if cap > 0 && fg.len() > cap {
        // Deterministic thinning: pick `cap` indices without replacement.
        let picks = rand::seq::index::sample(rng, fg.len(), cap).into_vec();
        fg = picks.into_iter().map(|i| fg[i]).collect();
    }
    let mut world = Vec::with_capacity(fg.len() * 2);
    let mut labels = Vec::with_capacity(fg.len() * 2);
    for (p, l) in &fg {
        world.push(*p);
        labels.push(*l);
    }
    for _ in 0..fg.len() {
        let p = [
            spec.origin[0] + rng.random_range(0.0..spec.extent[0]),
            spec.origin[1] + rng.random_range(0.0..spec.extent[1]),
            spec.origin[2] + rng.random_range(0.0..spec.extent[2]),
        ];
        let cell = spec.cell_of(p).expect("uniform draw stays inside the grid");
        world.push(p);
        labels.push(grid.labels[[cell[0], cell[1], cell[2]]]);
    }
    PointSet { world, labels }
}
