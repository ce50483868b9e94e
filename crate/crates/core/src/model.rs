//! The two full architectures and their configuration.
//!
//! PRFusion: backbones → GFM → NDM (image branch) → GFM → descriptor.
//! PRFusion++ inserts a window-local fusion layer after the first GFM and
//! therefore needs the camera–LiDAR extrinsics.

use std::fmt;

use prfusion_tensor::{no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionKind, SolverConfig};
use crate::backbone::{ImageBackbone, PointBackbone, IMAGE_STRIDE};
use crate::error::{Error, Result};
use crate::fusion::{gem_pool, Gfm, Lfm, LfmLayout, GEM_INIT_P};
use crate::geometry::{project_points, CameraModel, ExtrinsicCalibration, Pose};
use crate::image::Image;
use crate::ndm::{Ndm, DEFAULT_NEIGHBORS};
use crate::params::{ParamVisitor, Parameterized};

/// One paired camera + LiDAR capture.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub image: Image,
    /// LiDAR-frame points in meters.
    pub points: Vec<[f64; 3]>,
    /// World-from-vehicle pose.
    pub pose: Pose,
    pub cam: CameraModel,
    pub cal: Option<ExtrinsicCalibration>,
}

impl SceneFrame {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Data("frame has no points".into()));
        }
        if self.image.height() != self.cam.height || self.image.width() != self.cam.width {
            return Err(Error::Data(format!(
                "image is {}x{} but camera expects {}x{}",
                self.image.height(),
                self.image.width(),
                self.cam.height,
                self.cam.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub f: Vec<f64>,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    PrFusion,
    PrFusionPlusPlus,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PrFusion => "prfusion",
            Variant::PrFusionPlusPlus => "prfusion++",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prfusion" => Some(Variant::PrFusion),
            "prfusion++" => Some(Variant::PrFusionPlusPlus),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub c: usize,
    pub variant: Variant,
    pub attention: AttentionKind,
    pub metric_solver: SolverConfig,
    pub ndm_solver: SolverConfig,
    pub n2d: usize,
    pub n3d: usize,
    pub window: (usize, usize),
    pub knn: usize,
    pub voxel: f64,
    pub point_scale: f64,
    pub image_channels: usize,
    pub use_gfm: bool,
    pub use_ndm: bool,
    pub use_lfm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c: 64,
            variant: Variant::PrFusionPlusPlus,
            attention: AttentionKind::Metric,
            metric_solver: SolverConfig::default(),
            ndm_solver: SolverConfig::default(),
            n2d: 16,
            n3d: 16,
            window: (1, 1),
            knn: DEFAULT_NEIGHBORS,
            voxel: 0.1,
            point_scale: 0.05,
            image_channels: 3,
            use_gfm: true,
            use_ndm: true,
            use_lfm: true,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "variant",
        "c",
        "attention",
        "metric_horizon",
        "metric_steps",
        "ndm_horizon",
        "ndm_steps",
        "n2d",
        "n3d",
        "window_h",
        "window_w",
        "knn",
        "voxel",
        "point_scale",
        "image_channels",
        "use_gfm",
        "use_ndm",
        "use_lfm",
        "model_seed",
    ];

    /// Sets one key; returns `false` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "variant" => {
                self.variant = Variant::parse(value).ok_or_else(|| Error::Config(format!("unknown variant {value:?}")))?
            }
            "c" => self.c = parse(key, value)?,
            "attention" => {
                self.attention =
                    AttentionKind::parse(value).ok_or_else(|| Error::Config(format!("unknown attention {value:?}")))?
            }
            "metric_horizon" => self.metric_solver.horizon = parse(key, value)?,
            "metric_steps" => self.metric_solver.steps = parse(key, value)?,
            "ndm_horizon" => self.ndm_solver.horizon = parse(key, value)?,
            "ndm_steps" => self.ndm_solver.steps = parse(key, value)?,
            "n2d" => self.n2d = parse(key, value)?,
            "n3d" => self.n3d = parse(key, value)?,
            "window_h" => self.window.0 = parse(key, value)?,
            "window_w" => self.window.1 = parse(key, value)?,
            "knn" => self.knn = parse(key, value)?,
            "voxel" => self.voxel = parse(key, value)?,
            "point_scale" => self.point_scale = parse(key, value)?,
            "image_channels" => self.image_channels = parse(key, value)?,
            "use_gfm" => self.use_gfm = parse(key, value)?,
            "use_ndm" => self.use_ndm = parse(key, value)?,
            "use_lfm" => self.use_lfm = parse(key, value)?,
            "model_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.name().to_string()),
            ("c", self.c.to_string()),
            ("attention", self.attention.name().to_string()),
            ("metric_horizon", self.metric_solver.horizon.to_string()),
            ("metric_steps", self.metric_solver.steps.to_string()),
            ("ndm_horizon", self.ndm_solver.horizon.to_string()),
            ("ndm_steps", self.ndm_solver.steps.to_string()),
            ("n2d", self.n2d.to_string()),
            ("n3d", self.n3d.to_string()),
            ("window_h", self.window.0.to_string()),
            ("window_w", self.window.1.to_string()),
            ("knn", self.knn.to_string()),
            ("voxel", self.voxel.to_string()),
            ("point_scale", self.point_scale.to_string()),
            ("image_channels", self.image_channels.to_string()),
            ("use_gfm", self.use_gfm.to_string()),
            ("use_ndm", self.use_ndm.to_string()),
            ("use_lfm", self.use_lfm.to_string()),
            ("model_seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("unknown model key {:?}", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.c == 0 {
            return bad("c must be positive");
        }
        if self.metric_solver.steps == 0 || self.ndm_solver.steps == 0 {
            return bad("solver steps must be at least 1");
        }
        if !(self.metric_solver.horizon > 0.0 && self.ndm_solver.horizon > 0.0) {
            return bad("solver horizons must be positive");
        }
        if self.n2d == 0 || self.n3d == 0 {
            return bad("sampled node counts must be positive");
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return bad("window extents must be positive");
        }
        if self.knn == 0 {
            return bad("knn must be positive");
        }
        if !(self.voxel > 0.0 && self.point_scale > 0.0) {
            return bad("voxel and point_scale must be positive");
        }
        if !(self.image_channels == 1 || self.image_channels == 3) {
            return bad("image_channels must be 1 or 3");
        }
        Ok(())
    }

    pub fn has_lfm(&self) -> bool {
        self.variant == Variant::PrFusionPlusPlus && self.use_lfm
    }

    pub fn descriptor_len(&self) -> usize {
        3 * self.c
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub image_backbone: ImageBackbone,
    pub point_backbone: PointBackbone,
    pub gfm1: Gfm,
    pub lfm: Option<Lfm>,
    pub ndm: Ndm,
    pub gfm2: Gfm,
    pub p2d: Tensor,
    pub p3d: Tensor,
}

/// Intermediate feature maps, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub descriptor: Tensor,
    pub f2d: Tensor,
    pub f3d: Tensor,
    pub f_gfm: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.c;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gfm = |rng: &mut ChaCha8Rng| Gfm::init(c, config.attention, config.metric_solver, config.n2d, config.n3d, rng);
        let image_backbone = ImageBackbone::init(config.image_channels, c, &mut rng)?;
        let point_backbone = PointBackbone::init(c, config.voxel, config.point_scale, &mut rng)?;
        let gfm1 = gfm(&mut rng)?;
        let lfm = if config.has_lfm() {
            Some(Lfm::init(c, config.attention, config.metric_solver, config.window, &mut rng)?)
        } else {
            None
        };
        let ndm = Ndm::init(c, 2, config.knn, config.ndm_solver, &mut rng)?;
        let gfm2 = gfm(&mut rng)?;
        Ok(Model {
            config,
            image_backbone,
            point_backbone,
            gfm1,
            lfm,
            ndm,
            gfm2,
            p2d: Tensor::param(vec![GEM_INIT_P], &[1])?,
            p3d: Tensor::param(vec![GEM_INIT_P], &[1])?,
        })
    }

    pub fn forward(&self, frame: &SceneFrame) -> Result<Tensor> {
        Ok(self.trace(frame)?.descriptor)
    }

    pub fn trace(&self, frame: &SceneFrame) -> Result<ForwardTrace> {
        frame.validate()?;
        if frame.image.channels() != self.config.image_channels {
            return Err(Error::Data(format!(
                "image has {} channels, model expects {}",
                frame.image.channels(),
                self.config.image_channels
            )));
        }
        let img = self.image_backbone.forward(&frame.image)?;
        let pts = self.point_backbone.forward(&frame.points)?;
        let (mut f2d, mut f3d) = (img.features.clone(), pts.features.clone());

        if self.config.use_gfm {
            let out = self.gfm1.forward(&f2d, &f3d)?;
            (f2d, f3d) = (out.f2d, out.f3d);
        }

        if let Some(lfm) = &self.lfm {
            let cal = frame
                .cal
                .as_ref()
                .ok_or_else(|| Error::Config("prfusion++ needs an extrinsic calibration".into()))?;
            let proj = project_points(&pts.points, cal, &frame.cam);
            let s = IMAGE_STRIDE as f64;
            let coords3d: Vec<[f64; 2]> = proj
                .pixels
                .iter()
                .zip(&proj.valid)
                .map(|(&[u, v], &ok)| if ok { [v / s, u / s] } else { [0.0, 0.0] })
                .collect();
            let layout = LfmLayout {
                coords2d: &img.coords,
                coords3d: &coords3d,
                valid3d: &proj.valid,
                extent: img.extent,
            };
            (f2d, f3d) = lfm.forward(&f2d, &f3d, &layout)?;
        }

        if self.config.use_ndm {
            let (h, w) = img.extent;
            let pos: Vec<f64> = img
                .coords
                .iter()
                .flat_map(|&[r, c]| [r / h as f64, c / w as f64])
                .collect();
            let pos = Tensor::new(pos, &[h * w, 2])?;
            f2d = self.ndm.forward(&f2d, Some(&pos)).map_err(|e| match e {
                Error::Tensor(prfusion_tensor::TensorError::Divergence { step }) => {
                    Error::Divergence(format!("diffusion state went non-finite at step {step}"))
                }
                other => other,
            })?;
        }

        let f_gfm = if self.config.use_gfm {
            let out = self.gfm2.forward(&f2d, &f3d)?;
            (f2d, f3d) = (out.f2d, out.f3d);
            out.f_gfm
        } else {
            self.gfm2.pool_only(&f2d, &f3d)?
        };

        let descriptor = Tensor::concat_cols(&[f_gfm.clone(), gem_pool(&f2d, &self.p2d)?, gem_pool(&f3d, &self.p3d)?])?;
        if !descriptor.is_finite() {
            return Err(Error::Divergence("descriptor has non-finite entries".into()));
        }
        Ok(ForwardTrace { descriptor, f2d, f3d, f_gfm })
    }

    /// Gradient-free descriptor with the frame's position attached.
    pub fn describe(&self, frame: &SceneFrame) -> Result<Descriptor> {
        let f = no_grad(|| self.forward(frame))?;
        Ok(Descriptor {
            f: f.to_vec(),
            position: frame.pose.position(),
        })
    }
}

impl Parameterized for Model {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        let c = &self.config;
        self.image_backbone.visit(&format!("{prefix}.image"), f);
        self.point_backbone.visit(&format!("{prefix}.points"), f);
        if c.use_gfm {
            self.gfm1.visit(&format!("{prefix}.gfm1"), f);
        }
        if let Some(lfm) = &self.lfm {
            lfm.visit(&format!("{prefix}.lfm"), f);
        }
        if c.use_ndm {
            self.ndm.visit(&format!("{prefix}.ndm"), f);
        }
        if c.use_gfm {
            self.gfm2.visit(&format!("{prefix}.gfm2"), f);
        } else {
            f(&format!("{prefix}.gfm2.p"), &self.gfm2.p);
        }
        f(&format!("{prefix}.p2d"), &self.p2d);
        f(&format!("{prefix}.p3d"), &self.p3d);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let (use_gfm, use_ndm) = (self.config.use_gfm, self.config.use_ndm);
        self.image_backbone.visit_mut(&format!("{prefix}.image"), f);
        self.point_backbone.visit_mut(&format!("{prefix}.points"), f);
        if use_gfm {
            self.gfm1.visit_mut(&format!("{prefix}.gfm1"), f);
        }
        if let Some(lfm) = &mut self.lfm {
            lfm.visit_mut(&format!("{prefix}.lfm"), f);
        }
        if use_ndm {
            self.ndm.visit_mut(&format!("{prefix}.ndm"), f);
        }
        if use_gfm {
            self.gfm2.visit_mut(&format!("{prefix}.gfm2"), f);
        } else {
            f(&format!("{prefix}.gfm2.p"), &mut self.gfm2.p);
        }
        f(&format!("{prefix}.p2d"), &mut self.p2d);
        f(&format!("{prefix}.p3d"), &mut self.p3d);
    }
}
