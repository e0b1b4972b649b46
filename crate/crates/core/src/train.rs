//! Training loop, optimizer and evaluation harness.
//!
//! The dataset is a handful of synthetic scenes rendered once up front;
//! each step runs the model on one scene in rotation, assembles the full
//! objective, and applies a decoupled-weight-decay Adam update under a
//! two-milestone step schedule. Everything is keyed by explicit seeds,
//! and the per-step point sampler is seeded from the step index alone,
//! so a resumed run replays the exact trace of an uninterrupted one.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdscene_tensor::ParamStore;

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::corruption::{corrupt, CorruptionSpec};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, depth_bce, point_head, point_loss, scal_loss, total_loss, LossReport, LossTerms,
    ScalMode,
};
use crate::metrics::{ConfusionMatrix, EvalReport, IGNORE_LABEL};
use crate::model::{
    flatten_labels, sample_points, Batch, ForwardOutput, Model, PointSet, StereoFrame,
};
use crate::scene::render::render_views;
use crate::scene::{generate_scene, LabelGrid, VoxelGridSpec};
use crate::semantic::FEATURE_STRIDE;

/// Default evaluation crops, in meters forward of the grid origin.
pub const EVAL_RANGES: [f64; 3] = [3.2, 6.4, 12.8];

/// Optimizer-step budget with which `ModelConfig::overfit` memorizes its
/// training scenes (mIoU at least 0.90, occupancy IoU at least 0.95 on
/// the scenes seeded by `OVERFIT_DATA_SEED`). Measured once and pinned;
/// the acceptance suite trains exactly this many steps.
pub const OVERFIT_STEPS: u64 = 2000;

/// Scene seed the memorization benchmark is pinned to.
pub const OVERFIT_DATA_SEED: u64 = 42;

/// One pre-rendered training scene.
pub struct SceneSample {
    pub batch: Batch,
    pub grid: LabelGrid,
    /// Flat x-major labels matching logit rows.
    pub labels: Vec<u8>,
    /// Ground-truth depth of the current left view at feature resolution.
    pub depth_feat: Array2<f64>,
}

pub struct Dataset {
    pub samples: Vec<SceneSample>,
}

/// Renders `config.train.scenes` synthetic scenes. Scene seeds derive
/// from `dataset_seed` alone, so the same seed always yields the same
/// pixel-identical dataset.
pub fn build_dataset(config: &ModelConfig, dataset_seed: u64) -> Result<Dataset> {
    let spec = config.grid_spec()?;
    let classes = config.class_set()?;
    let rig = config.rig()?;
    let mut samples = Vec::with_capacity(config.train.scenes);
    for i in 0..config.train.scenes {
        let seed = dataset_seed.wrapping_add(7919 * i as u64);
        let scene = generate_scene(
            seed,
            &spec,
            &classes,
            config.net.n_frames,
            config.train.boxes_per_scene,
        )?;
        let frames: Vec<StereoFrame> = (0..config.net.n_frames)
            .map(|f| {
                let (left, right) = render_views(&scene, &rig, f);
                StereoFrame { left, right }
            })
            .collect();
        let depth_feat = crate::depth::downsample_depth_min(&frames[0].left.depth, FEATURE_STRIDE);
        let grid = crate::scene::voxelize_labels(&scene, &spec, 0);
        let labels = flatten_labels(&grid);
        samples.push(SceneSample {
            batch: Batch { frames },
            grid,
            labels,
            depth_feat,
        });
    }
    Ok(Dataset { samples })
}

/// Adam with decoupled weight decay. Moment tables are name-keyed so
/// they serialize alongside the parameters.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("the gradient of {name}")));
            }
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(IxDyn(g.shape())));
            m.zip_mut_with(g, |mi, gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            // Decoupled decay shrinks the weight before the moment step.
            p.mapv_inplace(|x| x * (1.0 - lr * self.weight_decay));
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, mi, vi| {
                    let mh = mi / bc1;
                    let vh = vi / bc2;
                    *pi -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// Learning rate at a step of a run with `total` steps: the base rate
/// decays by `gamma` when the step reaches each milestone fraction.
pub fn lr_at(step: u64, total: u64, base: f64, milestones: [f64; 2], gamma: f64) -> f64 {
    let mut lr = base;
    for frac in milestones {
        if step as f64 >= frac * total as f64 {
            lr *= gamma;
        }
    }
    lr
}

/// Mixes the run seed with a step index into a fresh stream seed.
fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ (step.wrapping_add(1)).wrapping_mul(0x9E3779B97F4A7C15)
}

/// Assembles every objective term for one scene. Terms of disabled
/// branches are zero constants. `points` must be the set the forward
/// pass sampled its point features at.
pub fn scene_losses(
    config: &ModelConfig,
    sample: &SceneSample,
    out: &ForwardOutput,
    points: Option<&PointSet>,
) -> Result<(LossTerms, cdscene_tensor::Tensor)> {
    let g = out.sess.graph();
    let zero = || g.constant(ArrayD::zeros(IxDyn(&[1])));
    let bins = config.depth_bins()?;
    let probs = out.logits.softmax(1);
    let scal_sem = scal_loss(&probs, &sample.labels, ScalMode::Semantic, IGNORE_LABEL)?;
    let scal_geo = scal_loss(&probs, &sample.labels, ScalMode::Geometric, IGNORE_LABEL)?;
    let ce = ce_loss(&probs, &sample.labels, IGNORE_LABEL)?;
    let depth_d = match &out.d_dynamic {
        Some(d) => depth_bce(d, &sample.depth_feat, &bins)?.0,
        None => zero(),
    };
    let depth_s = match &out.d_static {
        Some(d) => depth_bce(d, &sample.depth_feat, &bins)?.0,
        None => zero(),
    };
    let (point_ce, point_lovasz) = match (&out.f_point, &out.v_point, points) {
        (Some(fp), Some(vp), Some(ps)) => {
            let probs_pt = point_head(&out.sess, &fp.data, &vp.data, config.classes.len());
            point_loss(&probs_pt, &ps.labels)?
        }
        _ => (zero(), zero()),
    };
    let terms = LossTerms {
        scal_sem,
        scal_geo,
        ce,
        depth_d,
        depth_s,
        point_ce,
        point_lovasz,
    };
    let total = total_loss(&terms, &config.loss)?;
    if !total.scalar().is_finite() {
        return Err(Error::Numeric("the total loss".into()));
    }
    Ok((terms, total))
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    /// One report per step executed by this call.
    pub history: Vec<LossReport>,
}

/// Runs (or resumes) training toward a budget of `total_steps` optimizer
/// steps; the learning-rate schedule is always laid out against that
/// budget. `stop_after` pauses the run at an absolute step so it can be
/// checkpointed and resumed later. Resuming replays the identical trace
/// because the scene rotation and the point sampler depend only on the
/// step index and the configured seeds.
pub fn train(
    config: &ModelConfig,
    dataset_seed: u64,
    total_steps: u64,
    stop_after: Option<u64>,
    resume: Option<&Checkpoint>,
) -> Result<TrainResult> {
    config.validate()?;
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be at least 1".into()));
    }
    let run_until = match stop_after {
        Some(s) if s > total_steps => {
            return Err(Error::Config(format!(
                "stop_after {s} exceeds the {total_steps}-step budget"
            )));
        }
        Some(s) => s,
        None => total_steps,
    };
    let (model, mut opt, start) = match resume {
        Some(ck) => {
            if ck.config != *config {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different config".into(),
                ));
            }
            if ck.step > total_steps {
                return Err(Error::Config(format!(
                    "checkpoint already has {} steps, beyond the requested {total_steps}",
                    ck.step
                )));
            }
            let model = ck.model()?;
            let mut opt = AdamW::new(config.train.weight_decay);
            opt.step = ck.step;
            opt.m = ck.opt_m.clone();
            opt.v = ck.opt_v.clone();
            (model, opt, ck.step)
        }
        None => (
            Model::build(config.clone())?,
            AdamW::new(config.train.weight_decay),
            0,
        ),
    };
    let data = build_dataset(config, dataset_seed)?;
    let spec = config.grid_spec()?;
    let mut history = Vec::with_capacity(run_until.saturating_sub(start) as usize);

    for step in start..run_until {
        let sample = &data.samples[(step as usize) % data.samples.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(config.seed, step));
        let points = sample_points(&sample.grid, &spec, config.train.point_cap, &mut rng);
        let out = model.forward(&sample.batch, Some(&points))?;
        let (terms, total) = scene_losses(config, sample, &out, Some(&points))?;
        history.push(terms.report(&total));

        let grads = out.sess.graph().backward(&total);
        let by_name = out.sess.grads_by_name(&grads);
        let lr = lr_at(
            step,
            total_steps,
            config.train.learning_rate,
            config.train.milestones,
            config.train.gamma,
        );
        let store = model.store();
        opt.apply(&mut store.borrow_mut(), &by_name, lr)?;
    }

    let store = model.store();
    let params: BTreeMap<String, ArrayD<f64>> = store
        .borrow()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(TrainResult {
        checkpoint: Checkpoint {
            config: config.clone(),
            params,
            opt_m: opt.m,
            opt_v: opt.v,
            step: run_until,
        },
        history,
    })
}

/// Mean loss over the first and last `window` steps of a history.
pub fn smoothed_endpoints(history: &[LossReport], window: usize) -> (f64, f64) {
    let w = window.max(1).min(history.len());
    let head: f64 = history[..w].iter().map(|r| r.total).sum::<f64>() / w as f64;
    let tail: f64 =
        history[history.len() - w..].iter().map(|r| r.total).sum::<f64>() / w as f64;
    (head, tail)
}

pub struct EvalOutcome {
    pub full: EvalReport,
    pub ranges: Vec<(f64, EvalReport)>,
}

impl EvalOutcome {
    /// Flat "key = value" lines, range-cropped entries prefixed.
    pub fn lines(&self, config: &ModelConfig) -> Result<Vec<String>> {
        let classes = config.class_set()?;
        let mut out = self.full.lines(&classes, "");
        for (r, rep) in &self.ranges {
            out.extend(rep.lines(&classes, &format!("range_{r}.")));
        }
        Ok(out)
    }
}

fn mask_beyond(grid: &LabelGrid, spec: &VoxelGridSpec, range: f64) -> LabelGrid {
    let mut out = grid.clone();
    for ix in 0..spec.dims[0] {
        let cx = (ix as f64 + 0.5) * spec.voxel_size()[0];
        if cx > range {
            for iy in 0..spec.dims[1] {
                for iz in 0..spec.dims[2] {
                    out.labels[[ix, iy, iz]] = IGNORE_LABEL;
                }
            }
        }
    }
    out
}

/// Scores the model on every scene of a dataset, whole-grid and cropped
/// to each range. An optional corruption is applied to all input images
/// before the forward pass.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    ranges: &[f64],
    corruption: Option<CorruptionSpec>,
) -> Result<EvalOutcome> {
    if data.samples.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one scene".into()));
    }
    let spec = model.config().grid_spec()?;
    let n_classes = model.config().classes.len();
    let mut conf_full = ConfusionMatrix::new(n_classes);
    let mut conf_ranges: Vec<ConfusionMatrix> =
        ranges.iter().map(|_| ConfusionMatrix::new(n_classes)).collect();

    for sample in &data.samples {
        let batch = match corruption {
            Some(spec_c) => Batch {
                frames: sample
                    .batch
                    .frames
                    .iter()
                    .map(|f| {
                        let mut fr = f.clone();
                        fr.left.image = corrupt(&fr.left.image, spec_c);
                        fr.right.image = corrupt(&fr.right.image, spec_c);
                        fr
                    })
                    .collect(),
            },
            None => sample.batch.clone(),
        };
        let out = model.forward(&batch, None)?;
        let pred = model.decode_labels(&out.logits)?;
        conf_full.accumulate(&pred, &sample.grid, IGNORE_LABEL)?;
        for (ci, &r) in ranges.iter().enumerate() {
            let pred_m = mask_beyond(&pred, &spec, r);
            let gt_m = mask_beyond(&sample.grid, &spec, r);
            conf_ranges[ci].accumulate(&pred_m, &gt_m, IGNORE_LABEL)?;
        }
    }
    Ok(EvalOutcome {
        full: EvalReport::from_confusion(&conf_full),
        ranges: ranges
            .iter()
            .zip(conf_ranges)
            .map(|(&r, c)| (r, EvalReport::from_confusion(&c)))
            .collect(),
    })
}
