//! Run configuration.
//!
//! One versioned TOML document drives model construction, training and
//! evaluation. Unknown keys are rejected so stale configs fail loudly,
//! and every section round-trips losslessly through serialization.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsaf::{AttentionConfig, FusionStrategy};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::scene::{CameraIntrinsics, CameraPose, CameraRig, SemanticClassSet, VoxelGridSpec};
use crate::semantic::FEATURE_STRIDE;

pub const CONFIG_VERSION: u32 = 1;

/// Attach the file path to an I/O error before wrapping it.
pub(crate) fn annotate(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

/// Which architectural pieces are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    /// Language-guided semantic fusion of the image features.
    pub use_lmms: bool,
    /// Monocular-plus-stereo depth branch.
    pub use_dynamic: bool,
    /// Temporal multi-frame depth branch.
    pub use_static: bool,
    /// Adaptive attention fusion of the two volumes.
    pub use_dsaf: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_lmms: true,
            use_dynamic: true,
            use_static: true,
            use_dsaf: true,
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.use_dynamic && !self.use_static {
            return Err(Error::Config(
                "at least one of use_dynamic/use_static must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Named rows of the component ablation: `baseline` is the dynamic
    /// branch alone, `a`/`b` add the language fusion to one branch,
    /// `c` runs both branches, `d` adds adaptive fusion without the
    /// language path, `e` enables everything.
    pub fn row(name: &str) -> Result<Self> {
        let (use_lmms, use_dynamic, use_static, use_dsaf) = match name {
            "baseline" => (false, true, false, false),
            "a" => (true, true, false, false),
            "b" => (true, false, true, false),
            "c" => (true, true, true, false),
            "d" => (false, true, true, true),
            "e" => (true, true, true, true),
            other => {
                return Err(Error::Config(format!("unknown ablation row {other:?}")));
            }
        };
        Ok(Self {
            use_lmms,
            use_dynamic,
            use_static,
            use_dsaf,
        })
    }

    pub const ROWS: [&'static str; 6] = ["baseline", "a", "b", "c", "d", "e"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSection {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    /// Channel width of the 3-d feature volumes.
    pub volume_channels: usize,
    /// Frames consumed by the temporal branch (current plus past).
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Schedule breakpoints as fractions of the total step count.
    pub milestones: [f64; 2],
    /// Learning-rate multiplier applied at each milestone.
    pub gamma: f64,
    /// Scenes in the synthetic training set.
    pub scenes: usize,
    pub boxes_per_scene: usize,
    /// Upper bound on sampled foreground points per step (0 = all).
    pub point_cap: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            milestones: [0.6, 0.85],
            gamma: 0.1,
            scenes: 4,
            boxes_per_scene: 5,
            point_cap: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub seed: u64,
    pub grid: GridSection,
    pub classes: Vec<String>,
    pub camera: CameraSection,
    pub bins: BinSection,
    pub net: NetSection,
    pub attention: AttentionConfig,
    pub fusion: FusionStrategy,
    pub flags: AblationFlags,
    pub loss: LossWeights,
    pub train: TrainSection,
}

impl ModelConfig {
    /// Desk-scale defaults used by the synthetic benchmark.
    pub fn toy() -> Self {
        let spec = VoxelGridSpec::toy();
        Self {
            version: CONFIG_VERSION,
            seed: 7,
            grid: GridSection {
                origin: spec.origin,
                extent: spec.extent,
                dims: spec.dims,
            },
            classes: SemanticClassSet::toy().names().to_vec(),
            camera: CameraSection {
                fx: 60.0,
                fy: 60.0,
                cx: 32.0,
                cy: 24.0,
                width: 64,
                height: 48,
                baseline: 1.0,
            },
            bins: BinSection {
                d_min: 1.0,
                d_max: 12.8,
                count: 16,
            },
            net: NetSection {
                volume_channels: 32,
                n_frames: 3,
            },
            attention: AttentionConfig::default(),
            fusion: FusionStrategy::Dsaf,
            flags: AblationFlags::default(),
            loss: LossWeights::default(),
            train: TrainSection::default(),
        }
    }

    /// Recipe that memorizes its four training scenes: the full
    /// component set on the desk-scale setup, a hot learning rate, and
    /// no weight decay (decay fights memorization). Reaches its target
    /// scores within `crate::train::OVERFIT_STEPS` steps.
    pub fn overfit() -> Self {
        let mut cfg = Self::toy();
        cfg.train.learning_rate = 1e-3;
        cfg.train.weight_decay = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let spec = self.grid_spec()?;
        for (a, d) in spec.dims.iter().enumerate() {
            if d % 2 != 0 {
                return Err(Error::Config(format!(
                    "grid dim {a} must be even for the half-resolution volume, got {d}"
                )));
            }
        }
        self.class_set()?;
        self.depth_bins()?;
        let cam = &self.camera;
        CameraIntrinsics::new(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)?;
        if cam.width % FEATURE_STRIDE != 0 || cam.height % FEATURE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image {}x{} must be divisible by the feature stride {FEATURE_STRIDE}",
                cam.width, cam.height
            )));
        }
        if cam.baseline <= 0.0 {
            return Err(Error::Config("baseline must be positive".into()));
        }
        if self.net.volume_channels == 0
            || self.net.volume_channels % self.attention.heads != 0
        {
            return Err(Error::Config(format!(
                "volume_channels {} must be a positive multiple of {} attention heads",
                self.net.volume_channels, self.attention.heads
            )));
        }
        if !(2..=5).contains(&self.net.n_frames) {
            return Err(Error::Config(format!(
                "n_frames {} outside the supported 2..=5",
                self.net.n_frames
            )));
        }
        self.attention.validate()?;
        self.flags.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0 < t.milestones[0]
            && t.milestones[0] < t.milestones[1]
            && t.milestones[1] < 1.0)
        {
            return Err(Error::Config(format!(
                "milestones {:?} must satisfy 0 < m0 < m1 < 1",
                t.milestones
            )));
        }
        if !(0.0 < t.gamma && t.gamma < 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1)".into()));
        }
        if t.scenes == 0 || t.boxes_per_scene == 0 {
            return Err(Error::Config(
                "scenes and boxes_per_scene must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(self.grid.origin, self.grid.extent, self.grid.dims)
    }

    /// Grid at half resolution, where the feature volumes live.
    pub fn pool_spec(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(
            self.grid.origin,
            self.grid.extent,
            [
                self.grid.dims[0] / 2,
                self.grid.dims[1] / 2,
                self.grid.dims[2] / 2,
            ],
        )
    }

    pub fn class_set(&self) -> Result<SemanticClassSet> {
        SemanticClassSet::new(self.classes.clone())
    }

    pub fn depth_bins(&self) -> Result<crate::depth::DepthBins> {
        crate::depth::DepthBins::new(self.bins.d_min, self.bins.d_max, self.bins.count)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let c = &self.camera;
        CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
    }

    /// Forward-driving rig: frame 0 at the origin offset, older frames
    /// stepped back with a slight lateral drift for temporal parallax.
    pub fn rig(&self) -> Result<CameraRig> {
        let poses = (0..self.net.n_frames)
            .map(|i| {
                CameraPose::looking_forward([-0.5 - 0.6 * i as f64, 0.3 * i as f64, 1.2])
            })
            .collect();
        CameraRig::new(self.intrinsics()?, poses, self.camera.baseline)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| annotate(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| annotate(e, path))?;
        Self::from_toml_str(&text)
    }
}
